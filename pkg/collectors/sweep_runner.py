#!/usr/bin/env python3
"""
Sweep Runner - Policy Comparison Grids
======================================

Builds and runs comparison grids over policies, GPU budgets, decode fractions
and traces (one trace per block size):
1. Parses policy specs such as `tide:4`, `tide:auto`, `perstep`, `static@first-b`
2. Drops decoded tokens from routing when a grid sweeps decode fractions
3. Resolves `tide:auto` to the simulated optimum for each grid cell
4. Fans the simulations out over worker threads
5. Summarizes the run for the JSON run log
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

from utils.cost_model import optimize_tau
from utils.errors import ValidationError
from utils.moe_types import ColdStart, HardwareProfile, PolicyConfig, PolicyKind, RoutingTrace
from utils.routing_trace import decode_schedule, drop_decoded
from utils.simulator import ComparisonTable, SimConfig, compare

logger = logging.getLogger(__name__)

AUTO_TAU = "auto"


@dataclass(frozen=True)
class PolicySpec:
    """One policy column of a comparison grid."""

    kind: PolicyKind
    tau: Optional[str] = None  # integer text or "auto"
    cold_start: Optional[ColdStart] = None

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        body, _, cold = text.strip().partition("@")
        name, _, tau = body.partition(":")
        try:
            kind = PolicyKind(name.strip().lower())
        except ValueError:
            raise ValidationError(
                f"--policies: unknown policy {name!r} (expected tide, perstep or static)"
            )
        tau = tau.strip() or None
        if tau is not None and kind is not PolicyKind.TIDE:
            raise ValidationError(f"--policies: only tide takes an interval, got {text!r}")
        if kind is PolicyKind.TIDE:
            if tau is None:
                raise ValidationError(f"--policies: tide needs an interval, e.g. tide:4 or tide:{AUTO_TAU}")
            if tau != AUTO_TAU and not tau.isdigit():
                raise ValidationError(f"--policies: bad interval in {text!r}")
        cold_start = None
        if cold:
            try:
                cold_start = ColdStart(cold.strip().lower())
            except ValueError:
                raise ValidationError(f"--policies: unknown cold start {cold!r}")
        return cls(kind=kind, tau=tau, cold_start=cold_start)

    @property
    def is_auto(self) -> bool:
        return self.tau == AUTO_TAU

    def to_config(self, default_cold_start: ColdStart, tau: Optional[int] = None) -> PolicyConfig:
        cold_start = self.cold_start or default_cold_start
        if self.kind is PolicyKind.TIDE:
            return PolicyConfig.tide(tau if tau is not None else int(self.tau), cold_start=cold_start)
        return PolicyConfig(kind=self.kind, cold_start=cold_start)


def parse_policies(text: str) -> List[PolicySpec]:
    specs = [PolicySpec.parse(item) for item in text.split(",") if item.strip()]
    if not specs:
        raise ValidationError("--policies: at least one policy is required")
    return specs


def parse_fraction_list(flag: str, text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{flag}: expected comma-separated numbers, got {text!r}")
    if not values:
        raise ValidationError(f"{flag}: expected at least one value")
    bad = [v for v in values if not 0.0 < v <= 1.0]
    if bad:
        raise ValidationError(f"{flag}: fractions must lie in (0, 1], got {bad[0]:g}")
    return values


def parse_int_list(flag: str, text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{flag}: expected comma-separated integers, got {text!r}")
    if not values:
        raise ValidationError(f"{flag}: expected at least one value")
    return values


class SweepRunner:
    """Runs one comparison table per (trace, decode fraction, budget) cell of a grid."""

    def __init__(
        self,
        profile: HardwareProfile,
        jobs: int = 1,
        default_cold_start: ColdStart = ColdStart.FIRST_B,
        decode_fraction: float = 0.1,
    ):
        self.profile = profile
        self.jobs = max(1, jobs)
        self.default_cold_start = default_cold_start
        self.decode_fraction = decode_fraction
        self.resolved_taus: Dict[str, int] = {}

    def _base_config(
        self,
        trace: RoutingTrace,
        budget: int,
        policy: PolicyConfig,
        decode_fraction: Optional[float] = None,
    ) -> SimConfig:
        shape = trace.shape.with_budget(budget)
        return SimConfig(
            shape=shape,
            policy=policy,
            profile=self.profile,
            traces=(trace,),
            decode_fraction=decode_fraction or self.decode_fraction,
        )

    def _resolve(
        self,
        spec: PolicySpec,
        trace: RoutingTrace,
        budget: int,
        key: str,
        decode_fraction: Optional[float] = None,
    ) -> PolicyConfig:
        if not spec.is_auto:
            return spec.to_config(self.default_cold_start)
        base = self._base_config(
            trace, budget, spec.to_config(self.default_cold_start, tau=1), decode_fraction
        )
        best = optimize_tau(mode="simulated", sim_config=base, jobs=self.jobs)
        self.resolved_taus[key] = best.tau
        logger.info(f"🎯 {key}: tide:auto -> tau={best.tau}")
        return spec.to_config(self.default_cold_start, tau=best.tau)

    def run_grid(
        self,
        traces: Sequence[RoutingTrace],
        budgets: Optional[Sequence[int]],
        policies: Sequence[PolicySpec],
        baseline: int = 0,
        decode_fractions: Optional[Sequence[float]] = None,
    ) -> List[ComparisonTable]:
        """
        Without budgets each trace runs at the budget in its header. With
        decode_fractions every trace is replayed once per fraction, tokens
        leaving routing as the geometric decode schedule finalizes them.
        """
        tables = []
        for index, source in enumerate(traces):
            T, N = source.shape.block_size, source.shape.num_tokens
            for fraction in decode_fractions or [None]:
                trace = source
                if fraction is not None:
                    trace = drop_decoded(source, decode_schedule(T, N, fraction))
                for budget in budgets or [source.shape.gpu_budget]:
                    source.shape.check_budget(budget)
                    key = f"trace{index}/B={budget}"
                    if fraction is not None:
                        key += f"/f={fraction:g}"
                    configs = [
                        self._base_config(
                            trace,
                            budget,
                            self._resolve(spec, trace, budget, key, fraction),
                            fraction,
                        )
                        for spec in policies
                    ]
                    logger.info(f"📊 Comparing {len(configs)} policies on {key} (T={T})")
                    tables.append(compare(configs, baseline=baseline, jobs=self.jobs))
        return tables

    def run_log(self, tables: Sequence[ComparisonTable]) -> Dict[str, Any]:
        """Summary of a grid run for the JSON log."""
        return {
            "cells": len(tables),
            "resolved_taus": dict(self.resolved_taus),
            "rows": [
                {
                    "policy": row.label,
                    "budget": row.budget,
                    "block_size": row.block_size,
                    "decode_fraction": row.decode_fraction,
                    "throughput": row.throughput,
                    "speedup": row.speedup,
                }
                for table in tables
                for row in table.rows
            ],
        }


def merge_tables(tables: Sequence[ComparisonTable]) -> ComparisonTable:
    """Concatenate grid cells into one table (speedups stay per cell)."""
    rows = tuple(row for table in tables for row in table.rows)
    return ComparisonTable(baseline=tables[0].baseline if tables else "", rows=rows)
