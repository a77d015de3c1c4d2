#!/usr/bin/env python3
"""
Latency Cost Model
Per-step FFN latency, the expected migration and CPU costs of refreshing every
tau steps, the refresh-interval optimizer and hardware profile fitting.
All times are abstract time units.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import (
    DegenerateFit,
    EmpiricalTableMissingTau,
    InsufficientMeasurements,
    InvalidProfile,
    InvalidShape,
    InvalidTau,
    ParseError,
    TraceIoError,
    TraceRequiredForSimulatedMode,
    ValidationError,
)
from utils.moe_types import ColdStart, HardwareProfile, PolicyConfig, RoutingTrace
from utils.refresh_policy import ExpertRefreshPolicy, route_tokens
from utils.routing_trace import mean_drift, mean_drift_series
from utils.run_manifest import atomic_write_text, format_number, read_csv_rows, write_csv

logger = logging.getLogger(__name__)

COST_CURVE_SCHEMA = "cost-curve/1"
DEVICE_CLASSES = ("gpu", "cpu", "io")
MISS_UNITS = ("pairs", "experts")


# ---------------------------------------------------------------------------
# Per-step latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    """Latency of one step (or a sum of steps) split by device."""

    gpu_time: float = 0.0
    cpu_time: float = 0.0
    io_time: float = 0.0
    total: float = 0.0

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            gpu_time=self.gpu_time + other.gpu_time,
            cpu_time=self.cpu_time + other.cpu_time,
            io_time=self.io_time + other.io_time,
            total=self.total + other.total,
        )


def step_latency(
    gpu_pairs: int, cpu_pairs: int, migrations: int, profile: HardwareProfile
) -> CostBreakdown:
    """
    GPU and CPU experts run concurrently, so compute time is the slower side.
    Migrations add on top unless they overlap with compute.
    """
    if min(gpu_pairs, cpu_pairs, migrations) < 0:
        raise ValidationError(
            f"counts must be non-negative, got gpu={gpu_pairs} cpu={cpu_pairs} io={migrations}"
        )
    gpu_time = profile.c_gpu * gpu_pairs
    cpu_time = profile.c_cpu * cpu_pairs
    io_time = profile.c_io * migrations
    if profile.io_overlap:
        total = max(gpu_time, cpu_time, io_time)
    else:
        total = max(gpu_time, cpu_time) + io_time
    return CostBreakdown(gpu_time=gpu_time, cpu_time=cpu_time, io_time=io_time, total=total)


# ---------------------------------------------------------------------------
# Analytical model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticalParams:
    """
    Inputs of the expected-cost model.

    f_table maps tau to an expected miss fraction measured on a trace; when it
    is None the closed form derived from independent per-step drift is used.
    """

    d: float
    budget: int
    block_size: int
    c_io: float
    c_cpu: float
    f_table: Optional[Dict[int, float]] = None
    drift_series: Optional[Tuple[float, ...]] = None
    use_drift_series: bool = False
    miss_unit: str = "pairs"

    def __post_init__(self):
        if not 0.0 <= self.d <= 1.0:
            raise ValidationError(f"drift rate d must lie in [0, 1], got {self.d}")
        if self.budget < 1 or self.block_size < 1:
            raise InvalidShape(
                f"budget and block size must be positive, got B={self.budget} T={self.block_size}"
            )
        for name in ("c_io", "c_cpu"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidProfile(f"{name} must be non-negative, got {value}")
        if self.miss_unit not in MISS_UNITS:
            raise ValidationError(f"miss_unit must be one of {MISS_UNITS}, got {self.miss_unit!r}")
        if self.f_table is not None:
            table = {int(tau): float(v) for tau, v in self.f_table.items()}
            if any(v < 0 for v in table.values()):
                raise ValidationError("empirical miss fractions must be non-negative")
            object.__setattr__(self, "f_table", table)
            ordered = [table[tau] for tau in sorted(table)]
            if any(b < a for a, b in zip(ordered, ordered[1:])):
                logger.warning("⚠️ Empirical miss table is not non-decreasing in tau")
        if self.drift_series is not None:
            object.__setattr__(
                self, "drift_series", tuple(float(v) for v in self.drift_series)
            )

    @classmethod
    def from_profile(
        cls, d: float, budget: int, block_size: int, profile: HardwareProfile, **kwargs
    ) -> "AnalyticalParams":
        return cls(
            d=d,
            budget=budget,
            block_size=block_size,
            c_io=profile.c_io,
            c_cpu=profile.c_cpu,
            **kwargs,
        )

    @classmethod
    def from_trace(
        cls,
        trace: RoutingTrace,
        profile: HardwareProfile,
        budget: Optional[int] = None,
        f_mode: str = "closed",
        miss_unit: str = "pairs",
        cold_start: ColdStart = ColdStart.ORACLE_STEP0,
        use_drift_series: bool = False,
    ) -> "AnalyticalParams":
        """Measure d (and optionally an empirical f) from a routing trace."""
        budget = budget or trace.shape.gpu_budget
        if budget != trace.shape.gpu_budget:
            trace = trace.with_budget(budget)
        f_table = None
        if f_mode == "empirical":
            f_table = empirical_miss_table(trace, miss_unit=miss_unit, cold_start=cold_start)
        elif f_mode != "closed":
            raise ValidationError(f"f_mode must be 'closed' or 'empirical', got {f_mode!r}")
        return cls(
            d=mean_drift(trace, budget),
            budget=budget,
            block_size=trace.shape.block_size,
            c_io=profile.c_io,
            c_cpu=profile.c_cpu,
            f_table=f_table,
            drift_series=mean_drift_series(trace, budget),
            use_drift_series=use_drift_series,
            miss_unit=miss_unit,
        )

    def tau_domain(self) -> List[int]:
        return list(range(1, self.block_size))


def empirical_miss_table(
    trace: RoutingTrace,
    taus: Optional[Iterable[int]] = None,
    miss_unit: str = "pairs",
    cold_start: ColdStart = ColdStart.ORACLE_STEP0,
) -> Dict[int, float]:
    """
    Replay the interval-refresh policy for each tau and record the mean miss
    per layer-step, normalized by B: CPU-routed pairs, or distinct CPU experts
    touched when miss_unit is "experts".
    """
    if miss_unit not in MISS_UNITS:
        raise ValidationError(f"miss_unit must be one of {MISS_UNITS}, got {miss_unit!r}")
    shape = trace.shape
    T, L, B = shape.block_size, shape.num_layers, shape.gpu_budget
    taus = list(taus) if taus is not None else list(range(1, max(T, 2)))
    table = {}
    for tau in taus:
        policy = ExpertRefreshPolicy(
            shape, PolicyConfig.tide(min(tau, T), cold_start=cold_start)
        )
        policy.begin_block(trace)
        misses = 0
        for t in range(T):
            policy.step(t)
            for routed in route_tokens(policy.placements, trace, t):
                if miss_unit == "pairs":
                    misses += routed.cpu_pairs
                else:
                    missed = ~routed.on_gpu & routed.active[:, None]
                    misses += len(np.unique(routed.selections[missed]))
        table[int(tau)] = misses / (L * T * B)
    return table


def _check_tau(tau: int) -> int:
    if isinstance(tau, bool) or int(tau) != tau or tau < 1:
        raise InvalidTau(f"tau must be a positive integer, got {tau!r}")
    return int(tau)


def drifted_fraction(steps, d: float) -> np.ndarray:
    """1 - (1-d)^steps, computed without cancellation for small d."""
    steps = np.asarray(steps, dtype=np.float64)
    if d >= 1.0:
        return np.where(steps > 0, 1.0, 0.0)
    return 0.0 - np.expm1(steps * np.log1p(-d))


def closed_form_miss_fraction(tau: int, d: float) -> float:
    """Mean miss fraction of a placement aged 0..tau-1 steps under drift d."""
    tau = _check_tau(tau)
    return float(np.mean(drifted_fraction(np.arange(tau), d)))


def miss_fraction(tau: int, params: AnalyticalParams) -> float:
    tau = _check_tau(tau)
    if params.f_table is None:
        return closed_form_miss_fraction(tau, params.d)
    if tau not in params.f_table:
        raise EmpiricalTableMissingTau(f"empirical miss table has no entry for tau={tau}")
    return params.f_table[tau]


def expected_refresh_migrations(tau: int, params: AnalyticalParams) -> float:
    """Expected experts promoted at one refresh."""
    tau = _check_tau(tau)
    B = params.budget
    series = params.drift_series
    if not (params.use_drift_series and series):
        return B * float(drifted_fraction(tau, params.d))
    windows = [series[s : s + tau] for s in range(0, len(series), tau)]
    full = [w for w in windows if len(w) == tau] or [series]
    survival = [float(np.prod([1.0 - d for d in w])) for w in full]
    return B * (1.0 - float(np.mean(survival)))


def migration_cost(tau: int, params: AnalyticalParams) -> float:
    """c_io * (B*T/tau) * (1 - (1-d)^tau): T/tau refreshes, each moving the drifted experts."""
    tau = _check_tau(tau)
    refreshes = params.block_size / tau
    return params.c_io * refreshes * expected_refresh_migrations(tau, params)


def cpu_cost(tau: int, params: AnalyticalParams) -> float:
    """c_cpu * T * B * f(tau)."""
    return params.c_cpu * params.block_size * params.budget * miss_fraction(tau, params)


def total_cost(tau: int, params: AnalyticalParams) -> float:
    tau = _check_tau(tau)
    if tau > params.block_size - 1:
        raise InvalidTau(f"tau={tau} outside [1, {params.block_size - 1}]")
    return migration_cost(tau, params) + cpu_cost(tau, params)


@dataclass(frozen=True)
class CostCurvePoint:
    tau: int
    io_cost: float
    cpu_cost: float
    total: float


@dataclass(frozen=True)
class TauOptimum:
    """Chosen refresh interval and the full curve it was picked from."""

    tau: int
    curve: Tuple[CostCurvePoint, ...]
    mode: str

    @property
    def cost(self) -> float:
        return next(p.total for p in self.curve if p.tau == self.tau)


def cost_curve(params: AnalyticalParams, taus: Optional[Iterable[int]] = None) -> List[CostCurvePoint]:
    taus = params.tau_domain() if taus is None else list(taus)
    curve = []
    for tau in taus:
        io = migration_cost(tau, params)
        cpu = cpu_cost(tau, params)
        curve.append(CostCurvePoint(tau=int(tau), io_cost=io, cpu_cost=cpu, total=io + cpu))
    return curve


def argmin_tau(curve: Sequence[CostCurvePoint]) -> int:
    """Lowest total; ties go to the smallest tau."""
    return min(curve, key=lambda p: (p.total, p.tau)).tau


def optimize_tau(
    params: Optional[AnalyticalParams] = None,
    mode: str = "analytic",
    sim_config=None,
    jobs: int = 1,
) -> TauOptimum:
    """
    Pick the refresh interval in [1, T-1].

    analytic scans total_cost; simulated runs the simulator once per candidate
    on sim_config's trace and scores measured total latency.
    """
    if mode == "analytic":
        if params is None:
            raise ValidationError("analytic mode needs AnalyticalParams")
        if params.block_size < 2:
            raise InvalidShape(f"optimizing tau needs T >= 2, got T={params.block_size}")
        curve = cost_curve(params)
    elif mode == "simulated":
        if sim_config is None or not sim_config.has_trace():
            raise TraceRequiredForSimulatedMode("simulated mode needs a routing trace")
        curve = _simulated_curve(sim_config, jobs)
    else:
        raise ValidationError(f"mode must be 'analytic' or 'simulated', got {mode!r}")

    best = argmin_tau(curve)
    logger.info(f"🎯 Optimal tau ({mode}) = {best}")
    return TauOptimum(tau=best, curve=tuple(curve), mode=mode)


def _simulated_curve(sim_config, jobs: int) -> List[CostCurvePoint]:
    from utils.simulator import sweep_taus

    T = sim_config.shape.block_size
    if T < 2:
        raise InvalidShape(f"optimizing tau needs T >= 2, got T={T}")
    taus = list(range(1, T))
    reports = sweep_taus(sim_config, taus, jobs=jobs)
    curve = []
    for tau, report in zip(taus, reports):
        cost = report.aggregate.cost
        curve.append(
            CostCurvePoint(
                tau=tau,
                io_cost=cost.io_time,
                cpu_cost=cost.total - cost.io_time,
                total=cost.total,
            )
        )
    return curve


def greedy_tau_search(params: AnalyticalParams, start: int = 1) -> int:
    """Hill-climb from `start` while a neighbouring tau is strictly cheaper."""
    upper = params.block_size - 1
    if upper < 1:
        raise InvalidShape(f"optimizing tau needs T >= 2, got T={params.block_size}")
    tau = min(max(1, start), upper)
    current = total_cost(tau, params)
    while True:
        neighbours = [n for n in (tau - 1, tau + 1) if 1 <= n <= upper]
        costs = [(total_cost(n, params), n) for n in neighbours]
        better = [c for c in costs if c[0] < current]
        if not better:
            return tau
        current, tau = min(better)


def write_cost_curve_csv(curve: Sequence[CostCurvePoint], path: str, mode: str = "analytic") -> None:
    rows = ((p.tau, p.io_cost, p.cpu_cost, p.total) for p in curve)
    write_csv(path, f"{COST_CURVE_SCHEMA};mode={mode}", ["tau", "io_cost", "cpu_cost", "total"], rows)


# ---------------------------------------------------------------------------
# Hardware profiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    """One profiling sample: `amount` pairs (gpu/cpu) or migrations (io) took `time`."""

    device: str
    amount: float
    time: float

    def __post_init__(self):
        if self.device not in DEVICE_CLASSES:
            raise ValidationError(f"device must be one of {DEVICE_CLASSES}, got {self.device!r}")


@dataclass(frozen=True)
class ProfileFit:
    """Fitted profile with per-device RMS residuals and fixed overheads."""

    profile: HardwareProfile
    residuals: Dict[str, float] = field(default_factory=dict)
    overheads: Dict[str, float] = field(default_factory=dict)


MeasurementLike = Union[Measurement, Tuple[str, float, float]]


def _as_measurement(m: MeasurementLike) -> Measurement:
    if isinstance(m, Measurement):
        return m
    device, amount, time = m
    return Measurement(str(device), float(amount), float(time))


def fit_profile(
    measurements: Iterable[MeasurementLike], io_overlap: bool = False
) -> ProfileFit:
    """Least-squares time = c * amount + overhead for each device class."""
    grouped: Dict[str, List[Measurement]] = {d: [] for d in DEVICE_CLASSES}
    for m in map(_as_measurement, measurements):
        grouped[m.device].append(m)

    slopes, residuals, overheads = {}, {}, {}
    for device, samples in grouped.items():
        if len(samples) < 2:
            raise InsufficientMeasurements(
                f"{device}: need at least 2 measurements, got {len(samples)}"
            )
        amounts = np.array([s.amount for s in samples], dtype=np.float64)
        times = np.array([s.time for s in samples], dtype=np.float64)
        A = np.column_stack([amounts, np.ones_like(amounts)])
        coef, _, rank, _ = np.linalg.lstsq(A, times, rcond=None)
        if rank < 2:
            raise DegenerateFit(f"{device}: measurements do not span distinct amounts")
        slope, intercept = float(coef[0]), float(coef[1])
        if slope <= 0:
            raise DegenerateFit(f"{device}: fitted cost per unit {slope} is not positive")
        slopes[device] = slope
        overheads[device] = intercept
        residuals[device] = float(np.sqrt(np.mean((A @ coef - times) ** 2)))

    profile = HardwareProfile(
        c_io=slopes["io"], c_cpu=slopes["cpu"], c_gpu=slopes["gpu"], io_overlap=io_overlap
    )
    logger.info(
        f"📐 Fitted profile c_gpu={profile.c_gpu:.4g} c_cpu={profile.c_cpu:.4g} c_io={profile.c_io:.4g}"
    )
    return ProfileFit(profile=profile, residuals=residuals, overheads=overheads)


def synthesize_measurements(
    profile: HardwareProfile,
    amounts: Optional[Sequence[float]] = None,
    noise: float = 0.0,
    seed: int = 0,
    overhead: float = 0.0,
) -> List[Measurement]:
    """Profiling samples from known constants, with uniform multiplicative noise of +/- `noise`."""
    if amounts is None:
        amounts = [float(a) for a in np.linspace(10, 1000, 40)]
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    costs = {"gpu": profile.c_gpu, "cpu": profile.c_cpu, "io": profile.c_io}
    samples = []
    for device in DEVICE_CLASSES:
        for amount in amounts:
            factor = 1.0 + noise * (2.0 * rng.random() - 1.0) if noise else 1.0
            samples.append(
                Measurement(device, float(amount), (costs[device] * amount + overhead) * factor)
            )
    return samples


def load_measurements(path: str) -> List[Measurement]:
    """CSV with columns device,amount,time."""
    rows = read_csv_rows(path)
    try:
        return [Measurement(r["device"], float(r["amount"]), float(r["time"])) for r in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: bad measurement row ({e})")


def write_measurements(measurements: Sequence[Measurement], path: str) -> None:
    rows = ((m.device, m.amount, m.time) for m in measurements)
    write_csv(path, "measurements/1", ["device", "amount", "time"], rows)


def save_profile(profile: HardwareProfile, path: str) -> None:
    lines = [
        f"c_io={format_number(float(profile.c_io))}",
        f"c_cpu={format_number(float(profile.c_cpu))}",
        f"c_gpu={format_number(float(profile.c_gpu))}",
        f"io_overlap={format_number(bool(profile.io_overlap))}",
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_profile(text: str, source: str = "<profile>") -> HardwareProfile:
    """Key-value text; entries separated by newlines or commas, `#` starts a comment."""
    values: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0]
        for item in line.split(","):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise ParseError(f"{source}: expected key=value, got {item!r}")
            key, value = item.split("=", 1)
            values[key.strip()] = value.strip()

    missing = [k for k in ("c_io", "c_cpu", "c_gpu") if k not in values]
    if missing:
        raise ParseError(f"{source}: missing {', '.join(missing)}")
    try:
        costs = {k: float(values[k]) for k in ("c_io", "c_cpu", "c_gpu")}
    except ValueError as e:
        raise ParseError(f"{source}: {e}")
    overlap = values.get("io_overlap", "false").lower()
    if overlap not in ("true", "false"):
        raise ParseError(f"{source}: io_overlap must be true or false, got {overlap!r}")
    return HardwareProfile(io_overlap=overlap == "true", **costs)


def load_profile(path: str) -> HardwareProfile:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise TraceIoError(f"Cannot read profile {path}: {e}")
    return parse_profile(text, path)
