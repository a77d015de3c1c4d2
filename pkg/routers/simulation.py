#!/usr/bin/env python3
"""
Simulation Commands
simulate runs one policy over one or more trace blocks; compare runs a grid of
policies, budgets and traces and writes the comparison table.
"""

import json
import logging
from typing import List, Optional

from pydantic import Field, field_validator

from collectors.sweep_runner import (
    SweepRunner,
    merge_tables,
    parse_fraction_list,
    parse_int_list,
    parse_policies,
)
from routers.common import CommandResult, ProfileFlags
from utils.errors import ValidationError
from utils.moe_types import ColdStart, CounterMode, PolicyConfig, PolicyKind, RefreshMode
from utils.refresh_policy import write_decisions_jsonl
from utils.routing_trace import load_trace
from utils.run_manifest import atomic_write_text
from utils.simulator import (
    SimConfig,
    run,
    write_comparison_csv,
    write_report_csv,
    write_report_json,
)

logger = logging.getLogger(__name__)


class SimulateRequest(ProfileFlags):
    """simulate flags; several --trace files run as consecutive blocks."""

    trace: List[str] = Field(min_length=1)
    policy: PolicyKind
    tau: Optional[int] = Field(default=None, ge=1)
    cold_start: ColdStart = ColdStart.FIRST_B
    counter_mode: CounterMode = CounterMode.WINDOWED
    refresh_mode: RefreshMode = RefreshMode.OBSERVED
    budget: Optional[int] = Field(default=None, ge=1)
    decode_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    carry_counters: bool = False
    output: str
    json_output: Optional[str] = None
    decisions_output: Optional[str] = None

    @field_validator("trace", mode="before")
    @classmethod
    def _listify(cls, value):
        return [value] if isinstance(value, str) else value


def simulate(request: SimulateRequest) -> CommandResult:
    if request.policy is PolicyKind.TIDE and request.tau is None:
        raise ValidationError("--tau is required for --policy tide")
    profile = request.resolve()
    traces = [load_trace(path) for path in request.trace]
    shape = traces[0].shape
    if request.budget is not None:
        shape = shape.with_budget(request.budget)

    policy = PolicyConfig(
        kind=request.policy,
        tau=request.tau if request.policy is PolicyKind.TIDE else None,
        cold_start=request.cold_start,
        counter_mode=request.counter_mode,
        refresh_mode=request.refresh_mode,
    )
    config = SimConfig(
        shape=shape,
        policy=policy,
        profile=profile,
        traces=tuple(traces),
        blocks=len(traces),
        decode_fraction=request.decode_fraction,
        carry_counters=request.carry_counters,
        record_decisions=request.decisions_output is not None,
    )
    report = run(config)

    outputs = [request.output]
    write_report_csv(report, request.output)
    if request.json_output:
        write_report_json(report, request.json_output)
        outputs.append(request.json_output)
    if request.decisions_output:
        write_decisions_jsonl(report.decisions, request.decisions_output)
        outputs.append(request.decisions_output)

    agg = report.aggregate
    return CommandResult(
        command="simulate",
        outputs=outputs,
        inputs=list(request.trace) + request.profile_inputs(),
        summary={
            "policy": report.policy,
            "throughput_label": agg.throughput_label,
            "throughput": agg.throughput,
            "total_time": agg.total_time,
            "gpu_hit_rate": agg.gpu_hit_rate,
            "migrations": agg.migrations,
            "tokens_decoded": agg.tokens_decoded,
        },
        lines=[
            f"{report.policy}: {agg.throughput_label} = {agg.throughput:.6g} tokens/unit, "
            f"hit rate {agg.gpu_hit_rate:.4f}, migrations {agg.migrations}"
        ],
    )


class CompareRequest(ProfileFlags):
    """compare flags; one table cell per (trace, decode fraction, budget)."""

    trace: List[str] = Field(min_length=1)
    policies: str = "perstep,static,tide:auto"
    budgets: Optional[str] = None
    baseline: int = Field(default=0, ge=0)
    cold_start: ColdStart = ColdStart.FIRST_B
    decode_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    decode_fractions: Optional[str] = None
    jobs: int = Field(default=1, ge=1)
    output: str
    log_output: Optional[str] = None

    @field_validator("trace", mode="before")
    @classmethod
    def _listify(cls, value):
        return [value] if isinstance(value, str) else value


def compare_policies(request: CompareRequest) -> CommandResult:
    profile = request.resolve()
    policies = parse_policies(request.policies)
    if request.baseline >= len(policies):
        raise ValidationError(
            f"--baseline {request.baseline} out of range for {len(policies)} policies"
        )
    traces = [load_trace(path) for path in request.trace]
    runner = SweepRunner(
        profile,
        jobs=request.jobs,
        default_cold_start=request.cold_start,
        decode_fraction=request.decode_fraction,
    )

    budgets = parse_int_list("--budgets", request.budgets) if request.budgets else None
    fractions = (
        parse_fraction_list("--decode-fractions", request.decode_fractions)
        if request.decode_fractions
        else None
    )
    tables = runner.run_grid(
        traces, budgets, policies, baseline=request.baseline, decode_fractions=fractions
    )
    table = merge_tables(tables)

    outputs = [request.output]
    write_comparison_csv(table, request.output)
    if request.log_output:
        atomic_write_text(request.log_output, json.dumps(runner.run_log(tables), indent=2))
        outputs.append(request.log_output)

    return CommandResult(
        command="compare",
        outputs=outputs,
        inputs=list(request.trace) + request.profile_inputs(),
        summary={"cells": len(tables), "resolved_taus": runner.resolved_taus},
        lines=[t.format() for t in tables],
    )
