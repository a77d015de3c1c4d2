#!/usr/bin/env python3
"""
Trace-Driven Simulator
Drives a placement policy over routing traces block by block, applies the
latency model at every step and aggregates per-step and per-layer reports.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel

from utils.cost_model import CostBreakdown, step_latency
from utils.errors import (
    IncompatibleConfigs,
    InvalidSpec,
    LayerOutOfRange,
    ShapeMismatch,
    TraceExhausted,
    ValidationError,
)
from utils.moe_types import (
    HardwareProfile,
    ModelShape,
    PolicyConfig,
    PolicyKind,
    RoutingTrace,
)
from utils.refresh_policy import ExpertRefreshPolicy, StepDecision, route_tokens
from utils.routing_trace import (
    GenSpec,
    decode_schedule,
    generate_blocks,
    mean_drift,
    schedule_increments,
)
from utils.run_manifest import atomic_write_text, write_csv

logger = logging.getLogger(__name__)

THROUGHPUT_LABEL = "FFN-bound throughput"
STEP_CSV_SCHEMA = "sim-steps/1"
STEP_CSV_HEADER = [
    "t",
    "gpu_pairs",
    "cpu_pairs",
    "migrations",
    "gpu_time",
    "cpu_time",
    "io_time",
    "total",
]

ItemT = TypeVar("ItemT")
ResultT = TypeVar("ResultT")


@dataclass(frozen=True)
class SimConfig:
    """One simulation: shape, policy, profile and where the routing comes from."""

    shape: ModelShape
    policy: PolicyConfig
    profile: HardwareProfile
    traces: Tuple[RoutingTrace, ...] = ()
    gen_spec: Optional[GenSpec] = None
    blocks: int = 1
    decode_schedule: Optional[Tuple[int, ...]] = None
    decode_fraction: float = 0.1
    carry_counters: bool = False
    record_assignments: bool = False
    record_decisions: bool = False

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        if self.decode_schedule is not None:
            object.__setattr__(
                self, "decode_schedule", tuple(int(v) for v in self.decode_schedule)
            )
        if self.blocks < 1:
            raise ValidationError(f"blocks must be positive, got {self.blocks}")

    def has_trace(self) -> bool:
        return bool(self.traces) or self.gen_spec is not None

    def with_policy(self, policy: PolicyConfig) -> "SimConfig":
        return replace(self, policy=policy)

    def with_budget(self, gpu_budget: int) -> "SimConfig":
        return replace(self, shape=self.shape.with_budget(gpu_budget))

    def block_traces(self) -> List[RoutingTrace]:
        """The traces this run consumes, re-budgeted to the configured B."""
        if self.traces:
            if len(self.traces) < self.blocks:
                raise TraceExhausted(
                    f"{self.blocks} blocks requested but only {len(self.traces)} traces given"
                )
            traces = list(self.traces[: self.blocks])
        elif self.gen_spec is not None:
            traces = generate_blocks(self.gen_spec, self.blocks)
        else:
            raise TraceExhausted("no trace source configured")

        aligned = []
        for block, trace in enumerate(traces):
            if trace.shape.routing_dims() != self.shape.routing_dims():
                raise ShapeMismatch(
                    f"block {block}: trace dims {trace.shape.routing_dims()} != "
                    f"config dims {self.shape.routing_dims()}"
                )
            if trace.shape.gpu_budget != self.shape.gpu_budget:
                trace = trace.with_budget(self.shape.gpu_budget)
            aligned.append(trace)
        return aligned

    def resolved_decode_schedule(self) -> Tuple[int, ...]:
        T, N = self.shape.block_size, self.shape.num_tokens
        schedule = self.decode_schedule
        if schedule is None:
            schedule = tuple(decode_schedule(T, N, self.decode_fraction))
        if len(schedule) != T + 1 or schedule[0] != 0 or schedule[-1] > N:
            raise InvalidSpec(f"decode schedule must run 0..<=N over {T + 1} entries")
        if any(b < a for a, b in zip(schedule, schedule[1:])):
            raise InvalidSpec("decode schedule must be non-decreasing")
        return schedule

    def describe(self) -> Dict[str, Any]:
        """Plain-data view for manifests."""
        return {
            "shape": asdict(self.shape),
            "policy": {
                "kind": self.policy.kind.value,
                "tau": self.policy.tau,
                "cold_start": self.policy.cold_start.value,
                "counter_mode": self.policy.counter_mode.value,
                "refresh_mode": self.policy.refresh_mode.value,
            },
            "profile": asdict(self.profile),
            "blocks": self.blocks,
            "decode_schedule": list(self.resolved_decode_schedule()),
            "carry_counters": self.carry_counters,
        }


@dataclass(frozen=True)
class StepReport:
    """Counts and latency of one step; layer is None once summed over layers."""

    block: int
    t: int
    gpu_pairs: int
    cpu_pairs: int
    migrations: int
    cost: CostBreakdown
    tokens_decoded: int = 0
    refreshed: bool = False
    layer: Optional[int] = None

    def csv_row(self, block_size: int) -> Tuple:
        return (
            self.block * block_size + self.t,
            self.gpu_pairs,
            self.cpu_pairs,
            self.migrations,
            self.cost.gpu_time,
            self.cost.cpu_time,
            self.cost.io_time,
            self.cost.total,
        )


@dataclass(frozen=True)
class SimAggregate:
    cost: CostBreakdown
    tokens_decoded: int
    throughput: float
    gpu_hit_rate: float
    gpu_pairs: int
    cpu_pairs: int
    migrations: int
    refreshes: int
    mean_drift: float
    throughput_label: str = THROUGHPUT_LABEL

    @property
    def total_time(self) -> float:
        return self.cost.total


@dataclass(frozen=True)
class SimReport:
    policy: str
    shape: ModelShape
    per_step: Tuple[StepReport, ...]
    per_layer: Tuple[Tuple[StepReport, ...], ...]
    aggregate: SimAggregate
    assignments: Optional[Tuple[Tuple[int, int, int, int, int], ...]] = None
    decisions: Optional[Tuple[StepDecision, ...]] = None


def aggregate_steps(
    steps: Sequence[StepReport], refreshes: int = 0, drift: float = 0.0
) -> SimAggregate:
    cost = CostBreakdown()
    for step in steps:
        cost = cost + step.cost
    gpu_pairs = sum(s.gpu_pairs for s in steps)
    cpu_pairs = sum(s.cpu_pairs for s in steps)
    tokens = sum(s.tokens_decoded for s in steps)
    pairs = gpu_pairs + cpu_pairs
    if cost.total > 0:
        throughput = tokens / cost.total
    else:
        throughput = float("inf") if tokens else 0.0
    return SimAggregate(
        cost=cost,
        tokens_decoded=tokens,
        throughput=throughput,
        gpu_hit_rate=gpu_pairs / pairs if pairs else 1.0,
        gpu_pairs=gpu_pairs,
        cpu_pairs=cpu_pairs,
        migrations=sum(s.migrations for s in steps),
        refreshes=refreshes,
        mean_drift=drift,
    )


def run(config: SimConfig) -> SimReport:
    """
    Simulate every block: per step the policy decides placement, tokens are
    routed to the device hosting each expert and the step is priced per layer.
    Layer latencies within a step add up.
    """
    shape = config.shape
    traces = config.block_traces()
    increments = schedule_increments(config.resolved_decode_schedule())
    policy = ExpertRefreshPolicy(shape, config.policy)

    per_step: List[StepReport] = []
    per_layer: List[List[StepReport]] = [[] for _ in range(shape.num_layers)]
    assignments: List[Tuple[int, int, int, int, int]] = []
    decisions_log: List[StepDecision] = []
    drifts = []

    logger.debug(f"🚀 Simulating {config.policy.label} over {len(traces)} block(s)")
    for block, trace in enumerate(traces):
        policy.begin_block(trace, carry_counters=config.carry_counters)
        drifts.append(mean_drift(trace, shape.gpu_budget) if shape.block_size > 1 else 0.0)
        for t in range(shape.block_size):
            decisions = policy.step(t)
            routed = route_tokens(policy.placements, trace, t)
            step_cost = CostBreakdown()
            gpu_pairs = cpu_pairs = migrations = 0
            for decision, layer_routing in zip(decisions, routed):
                cost = step_latency(
                    layer_routing.gpu_pairs,
                    layer_routing.cpu_pairs,
                    decision.migrations,
                    config.profile,
                )
                per_layer[decision.layer].append(
                    StepReport(
                        block=block,
                        t=t,
                        gpu_pairs=layer_routing.gpu_pairs,
                        cpu_pairs=layer_routing.cpu_pairs,
                        migrations=decision.migrations,
                        cost=cost,
                        tokens_decoded=increments[t],
                        refreshed=decision.refreshed,
                        layer=decision.layer,
                    )
                )
                step_cost = step_cost + cost
                gpu_pairs += layer_routing.gpu_pairs
                cpu_pairs += layer_routing.cpu_pairs
                migrations += decision.migrations
                if config.record_assignments:
                    assignments.extend(
                        (block, *row[:4]) for row in layer_routing.assignments()
                    )
            if config.record_decisions:
                decisions_log.extend(decisions)
            per_step.append(
                StepReport(
                    block=block,
                    t=t,
                    gpu_pairs=gpu_pairs,
                    cpu_pairs=cpu_pairs,
                    migrations=migrations,
                    cost=step_cost,
                    tokens_decoded=increments[t],
                    refreshed=decisions[0].refreshed if decisions else False,
                )
            )

    aggregate = aggregate_steps(
        per_step,
        refreshes=policy.stats.refreshes,
        drift=float(np.mean(drifts)) if drifts else 0.0,
    )
    logger.info(
        f"✅ {config.policy.label}: {THROUGHPUT_LABEL} {aggregate.throughput:.6g}, "
        f"hit rate {aggregate.gpu_hit_rate:.4f}, migrations {aggregate.migrations}"
    )
    return SimReport(
        policy=config.policy.label,
        shape=shape,
        per_step=tuple(per_step),
        per_layer=tuple(tuple(steps) for steps in per_layer),
        aggregate=aggregate,
        assignments=tuple(sorted(assignments)) if config.record_assignments else None,
        decisions=tuple(decisions_log) if config.record_decisions else None,
    )


def per_layer_report(report: SimReport, layer: int) -> Tuple[StepReport, ...]:
    if not 0 <= layer < len(report.per_layer):
        raise LayerOutOfRange(f"layer {layer} out of range [0, {len(report.per_layer)})")
    return report.per_layer[layer]


def fan_out(
    fn: Callable[[ItemT], ResultT], items: Sequence[ItemT], jobs: int = 1
) -> List[ResultT]:
    """Map fn over items with up to `jobs` threads; results keep submission order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(jobs, len(items))) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]


def sweep_taus(config: SimConfig, taus: Sequence[int], jobs: int = 1) -> List[SimReport]:
    """One interval-refresh run per tau, other policy settings unchanged."""
    configs = [
        config.with_policy(replace(config.policy, kind=PolicyKind.TIDE, tau=int(tau)))
        for tau in taus
    ]
    logger.info(f"📊 Sweeping {len(configs)} tau values with {jobs} job(s)")
    return fan_out(run, configs, jobs)


def random_taus(block_size: int, count: int, seed: int) -> List[int]:
    """`count` intervals drawn uniformly from [1, T-1] with PCG64."""
    if block_size < 2:
        raise ValidationError(f"random taus need T >= 2, got T={block_size}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return [1 + int(rng.random() * (block_size - 1)) for _ in range(count)]


def best_placement_hit_rate(trace: RoutingTrace, budget: int) -> float:
    """Hit rate of the best possible B-subset at every (step, layer), by exhaustive search."""
    shape = trace.shape
    shape.check_budget(budget)
    hits = total = 0
    for t in range(shape.block_size):
        for layer in range(shape.num_layers):
            counts = trace.hit_counts(t, layer)
            best = max(
                int(counts[list(subset)].sum())
                for subset in itertools.combinations(range(shape.num_experts), budget)
            )
            hits += best
            total += int(counts.sum())
    return hits / total if total else 1.0


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    budget: int
    block_size: int
    throughput: float
    gpu_hit_rate: float
    migrations: int
    total_time: float
    speedup: float
    decode_fraction: float = 0.1


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    rows: Tuple[ComparisonRow, ...]
    reports: Tuple[SimReport, ...] = field(default=(), repr=False)

    def row(
        self,
        label: str,
        budget: Optional[int] = None,
        decode_fraction: Optional[float] = None,
    ) -> ComparisonRow:
        for r in self.rows:
            if r.label != label or (budget is not None and r.budget != budget):
                continue
            if decode_fraction is None or r.decode_fraction == decode_fraction:
                return r
        raise KeyError(label)

    def format(self) -> str:
        header = f"{'policy':<24}{'B':>6}{'T':>5}{'f':>6}{'throughput':>16}{'hit rate':>10}{'migr':>8}{'time':>16}{'speedup':>9}"
        lines = [f"{THROUGHPUT_LABEL} (baseline: {self.baseline})", header]
        for r in self.rows:
            lines.append(
                f"{r.label:<24}{r.budget:>6}{r.block_size:>5}{r.decode_fraction:>6.2f}{r.throughput:>16.6g}"
                f"{r.gpu_hit_rate:>10.4f}{r.migrations:>8}{r.total_time:>16.6g}{r.speedup:>9.2f}"
            )
        return "\n".join(lines)


COMPARISON_HEADER = [
    "policy",
    "budget",
    "block_size",
    "throughput",
    "gpu_hit_rate",
    "migrations",
    "total_time",
    "speedup",
    "decode_fraction",
]


def _source_key(config: SimConfig):
    if config.traces:
        return ("traces", config.traces[: config.blocks])
    spec = config.gen_spec
    return ("gen", replace(spec, shape=spec.shape.with_budget(1)), config.blocks)


def compare(configs: Sequence[SimConfig], baseline: int = 0, jobs: int = 1) -> ComparisonTable:
    """Run configs sharing one trace and tabulate throughput against configs[baseline]."""
    configs = list(configs)
    if not configs:
        raise IncompatibleConfigs("nothing to compare")
    if not 0 <= baseline < len(configs):
        raise IncompatibleConfigs(f"baseline index {baseline} out of range")
    first = configs[0]
    for config in configs[1:]:
        if config.shape.routing_dims() != first.shape.routing_dims():
            raise IncompatibleConfigs(
                f"shape {config.shape.routing_dims()} differs from {first.shape.routing_dims()}"
            )
        if not config.has_trace() or _source_key(config) != _source_key(first):
            raise IncompatibleConfigs("configs do not share one routing trace")

    reports = fan_out(run, configs, jobs)
    base = reports[baseline].aggregate.throughput
    rows = []
    for config, report in zip(configs, reports):
        agg = report.aggregate
        rows.append(
            ComparisonRow(
                label=report.policy,
                budget=config.shape.gpu_budget,
                block_size=config.shape.block_size,
                throughput=agg.throughput,
                gpu_hit_rate=agg.gpu_hit_rate,
                migrations=agg.migrations,
                total_time=agg.total_time,
                speedup=agg.throughput / base if base else float("nan"),
                decode_fraction=config.decode_fraction,
            )
        )
    return ComparisonTable(baseline=reports[baseline].policy, rows=tuple(rows), reports=tuple(reports))


def write_comparison_csv(table: ComparisonTable, path: str) -> None:
    rows = (
        (
            r.label,
            r.budget,
            r.block_size,
            r.throughput,
            r.gpu_hit_rate,
            r.migrations,
            r.total_time,
            r.speedup,
            r.decode_fraction,
        )
        for r in table.rows
    )
    write_csv(path, f"comparison/2;baseline={table.baseline}", COMPARISON_HEADER, rows)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


class StepRecord(BaseModel):
    block: int
    t: int
    layer: Optional[int] = None
    gpu_pairs: int
    cpu_pairs: int
    migrations: int
    gpu_time: float
    cpu_time: float
    io_time: float
    total: float
    tokens_decoded: int
    refreshed: bool


class SimReportDocument(BaseModel):
    """Full JSON form of a SimReport."""

    schema_version: str = "sim-report/1"
    policy: str
    shape: Dict[str, int]
    throughput_label: str = THROUGHPUT_LABEL
    aggregate: Dict[str, Any]
    per_step: List[StepRecord]
    per_layer: List[List[StepRecord]]


def _record(step: StepReport) -> StepRecord:
    return StepRecord(
        block=step.block,
        t=step.t,
        layer=step.layer,
        gpu_pairs=step.gpu_pairs,
        cpu_pairs=step.cpu_pairs,
        migrations=step.migrations,
        gpu_time=step.cost.gpu_time,
        cpu_time=step.cost.cpu_time,
        io_time=step.cost.io_time,
        total=step.cost.total,
        tokens_decoded=step.tokens_decoded,
        refreshed=step.refreshed,
    )


def report_document(report: SimReport) -> SimReportDocument:
    agg = report.aggregate
    return SimReportDocument(
        policy=report.policy,
        shape=asdict(report.shape),
        aggregate={
            "total_time": agg.total_time,
            "gpu_time": agg.cost.gpu_time,
            "cpu_time": agg.cost.cpu_time,
            "io_time": agg.cost.io_time,
            "tokens_decoded": agg.tokens_decoded,
            "throughput": agg.throughput,
            "gpu_hit_rate": agg.gpu_hit_rate,
            "gpu_pairs": agg.gpu_pairs,
            "cpu_pairs": agg.cpu_pairs,
            "migrations": agg.migrations,
            "refreshes": agg.refreshes,
            "mean_drift": agg.mean_drift,
        },
        per_step=[_record(s) for s in report.per_step],
        per_layer=[[_record(s) for s in steps] for steps in report.per_layer],
    )


def write_report_json(report: SimReport, path: str) -> None:
    atomic_write_text(path, report_document(report).model_dump_json(indent=2))


def write_report_csv(report: SimReport, path: str) -> None:
    T = report.shape.block_size
    write_csv(path, STEP_CSV_SCHEMA, STEP_CSV_HEADER, (s.csv_row(T) for s in report.per_step))
