#!/usr/bin/env python3
"""
Optimizer and Profiling Commands
optimize-tau writes the refresh-interval cost curve and the chosen tau;
fit-profile turns profiling measurements into a hardware profile file.
"""

import logging
from typing import Literal, Optional

from pydantic import BaseModel, Field

from routers.common import CommandResult, ProfileFlags, require_seed
from utils.cost_model import (
    AnalyticalParams,
    fit_profile,
    greedy_tau_search,
    load_measurements,
    optimize_tau,
    save_profile,
    synthesize_measurements,
    write_cost_curve_csv,
    write_measurements,
)
from utils.errors import TraceRequiredForSimulatedMode, ValidationError
from utils.moe_types import ColdStart, HardwareProfile, PolicyConfig
from utils.routing_trace import load_trace
from utils.simulator import SimConfig

logger = logging.getLogger(__name__)


class OptimizeTauRequest(ProfileFlags):
    """optimize-tau flags: a trace, or explicit model parameters."""

    mode: Literal["analytic", "simulated"] = "analytic"
    trace: Optional[str] = None
    d: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    budget: Optional[int] = Field(default=None, ge=1)
    steps: Optional[int] = Field(default=None, ge=1)
    f_mode: Literal["closed", "empirical"] = "closed"
    miss_unit: Literal["pairs", "experts"] = "pairs"
    drift_series: bool = False
    cold_start: ColdStart = ColdStart.ORACLE_STEP0
    decode_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    jobs: int = Field(default=1, ge=1)
    output: str


def optimize(request: OptimizeTauRequest) -> CommandResult:
    profile = request.resolve()
    inputs = request.profile_inputs()
    trace = None
    if request.trace is not None:
        trace = load_trace(request.trace)
        inputs.append(request.trace)

    if request.mode == "simulated":
        if trace is None:
            raise TraceRequiredForSimulatedMode("--mode simulated needs --trace")
        shape = trace.shape.with_budget(request.budget or trace.shape.gpu_budget)
        config = SimConfig(
            shape=shape,
            policy=PolicyConfig.tide(1, cold_start=request.cold_start),
            profile=profile,
            traces=(trace,),
            decode_fraction=request.decode_fraction,
        )
        result = optimize_tau(mode="simulated", sim_config=config, jobs=request.jobs)
        greedy = None
    else:
        if trace is not None:
            params = AnalyticalParams.from_trace(
                trace,
                profile,
                budget=request.budget,
                f_mode=request.f_mode,
                miss_unit=request.miss_unit,
                cold_start=request.cold_start,
                use_drift_series=request.drift_series,
            )
        else:
            missing = [
                flag
                for flag, value in (("--d", request.d), ("--budget", request.budget), ("--steps", request.steps))
                if value is None
            ]
            if missing:
                raise ValidationError(f"analytic mode without --trace needs {', '.join(missing)}")
            if request.f_mode == "empirical":
                raise ValidationError("--f-mode empirical needs --trace")
            params = AnalyticalParams.from_profile(request.d, request.budget, request.steps, profile)
        result = optimize_tau(params, mode="analytic")
        greedy = greedy_tau_search(params)

    write_cost_curve_csv(result.curve, request.output, mode=result.mode)
    summary = {"mode": result.mode, "tau": result.tau, "cost": result.cost}
    if greedy is not None:
        summary["greedy_tau"] = greedy
    return CommandResult(
        command="optimize-tau",
        outputs=[request.output],
        inputs=inputs,
        summary=summary,
        lines=[f"tau* = {result.tau} ({result.mode})"],
    )


class FitProfileRequest(BaseModel):
    """fit-profile flags: a measurements CSV, or synthetic samples from known constants."""

    measurements: Optional[str] = None
    synthetic_c_io: Optional[float] = Field(default=None, gt=0.0)
    synthetic_c_cpu: Optional[float] = Field(default=None, gt=0.0)
    synthetic_c_gpu: Optional[float] = Field(default=None, gt=0.0)
    noise: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: Optional[int] = Field(default=None, ge=0)
    io_overlap: bool = False
    measurements_out: Optional[str] = None
    output: str


def fit(request: FitProfileRequest) -> CommandResult:
    inputs, seeds, outputs = [], {}, [request.output]
    if request.measurements is not None:
        samples = load_measurements(request.measurements)
        inputs.append(request.measurements)
    else:
        constants = (request.synthetic_c_io, request.synthetic_c_cpu, request.synthetic_c_gpu)
        if any(c is None for c in constants):
            raise ValidationError(
                "give --measurements or all of --synthetic-c-io, --synthetic-c-cpu, --synthetic-c-gpu"
            )
        seed = require_seed(request.seed) if request.noise else (request.seed or 0)
        seeds["seed"] = seed
        truth = HardwareProfile(c_io=constants[0], c_cpu=constants[1], c_gpu=constants[2])
        samples = synthesize_measurements(truth, noise=request.noise, seed=seed)
        if request.measurements_out:
            write_measurements(samples, request.measurements_out)
            outputs.append(request.measurements_out)

    fitted = fit_profile(samples, io_overlap=request.io_overlap)
    save_profile(fitted.profile, request.output)
    return CommandResult(
        command="fit-profile",
        outputs=outputs,
        inputs=inputs,
        seeds=seeds,
        summary={
            "c_io": fitted.profile.c_io,
            "c_cpu": fitted.profile.c_cpu,
            "c_gpu": fitted.profile.c_gpu,
            "residuals": fitted.residuals,
            "overheads": fitted.overheads,
        },
    )
