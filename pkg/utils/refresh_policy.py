#!/usr/bin/env python3
"""
Expert Refresh Policy Engine
Interval-based GPU expert placement driven by per-layer hit counters, plus the
per-step refresh and static baselines. Policies only move experts between
devices; they never change which expert serves which token.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.config import debug_checks_enabled
from utils.errors import ProvidedPlacementInvalid
from utils.moe_types import (
    ColdStart,
    CounterMode,
    HitCounter,
    ModelShape,
    Placement,
    PolicyConfig,
    RefreshMode,
    RoutingTrace,
    rank_top_b,
)
from utils.run_manifest import atomic_write_text

logger = logging.getLogger(__name__)

GPU = "gpu"
CPU = "cpu"


@dataclass(frozen=True)
class StepDecision:
    """Placement decision for one layer at one step."""

    t: int
    layer: int
    refreshed: bool
    promotions: Tuple[int, ...]  # CPU -> GPU
    evictions: Tuple[int, ...]  # GPU -> CPU
    placement_after: FrozenSet[int]
    block: int = 0

    @property
    def migrations(self) -> int:
        """Promotions are the transfers that cost I/O; evicted copies are dropped."""
        return len(self.promotions)

    def to_record(self) -> Dict:
        return {
            "block": self.block,
            "t": self.t,
            "layer": self.layer,
            "refreshed": self.refreshed,
            "promotions": list(self.promotions),
            "evictions": list(self.evictions),
        }


@dataclass(frozen=True, eq=False)
class LayerRouting:
    """Device assignment of every routed (token, expert) pair at one layer and step."""

    t: int
    layer: int
    gpu_pairs: int
    cpu_pairs: int
    on_gpu: np.ndarray  # (N, k), False for inactive tokens
    active: np.ndarray  # (N,)
    selections: np.ndarray  # (N, k)

    @property
    def total_pairs(self) -> int:
        return self.gpu_pairs + self.cpu_pairs

    def assignments(self) -> List[Tuple[int, int, int, int, str]]:
        """(t, layer, token, expert, device) for every active pair."""
        rows = []
        for n in np.flatnonzero(self.active):
            for j, expert in enumerate(self.selections[n]):
                device = GPU if self.on_gpu[n, j] else CPU
                rows.append((self.t, self.layer, int(n), int(expert), device))
        return rows


def select_top_b(counter: Union[HitCounter, np.ndarray], budget: int) -> FrozenSet[int]:
    """The `budget` most-hit experts, ties broken toward the lower ID."""
    counts = counter.counts if isinstance(counter, HitCounter) else np.asarray(counter)
    return frozenset(int(e) for e in rank_top_b(counts, budget))


def _provided_sets(shape: ModelShape, provided: Sequence[FrozenSet[int]]) -> List[FrozenSet[int]]:
    # A single set applies to every layer
    if len(provided) == 1 and shape.num_layers > 1:
        provided = list(provided) * shape.num_layers
    if len(provided) != shape.num_layers:
        raise ProvidedPlacementInvalid(
            f"provided placement has {len(provided)} layers, expected {shape.num_layers}"
        )
    for layer, gpu_set in enumerate(provided):
        if len(gpu_set) > shape.gpu_budget:
            raise ProvidedPlacementInvalid(
                f"layer {layer}: {len(gpu_set)} GPU experts exceed budget {shape.gpu_budget}"
            )
        stray = sorted(e for e in gpu_set if not 0 <= e < shape.num_experts)
        if stray:
            raise ProvidedPlacementInvalid(
                f"layer {layer}: unknown experts {stray} (E={shape.num_experts})"
            )
    return list(provided)


def init_placement(
    shape: ModelShape, config: PolicyConfig, trace: Optional[RoutingTrace] = None
) -> List[Placement]:
    """Cold-start placement for every layer."""
    B, E = shape.gpu_budget, shape.num_experts
    if config.cold_start is ColdStart.FIRST_B:
        sets = [set(range(B))] * shape.num_layers
    elif config.cold_start is ColdStart.ORACLE_STEP0:
        if trace is None:
            raise ProvidedPlacementInvalid("oracle-step0 cold start needs a trace")
        sets = [
            set(select_top_b(trace.hit_counts(0, layer), B))
            for layer in range(shape.num_layers)
        ]
    else:
        sets = [set(s) for s in _provided_sets(shape, config.provided)]
    return [Placement(E, B, set(s)) for s in sets]


def route_tokens(
    placements: Sequence[Placement], trace: RoutingTrace, t: int
) -> List[LayerRouting]:
    """Send every active (token, expert) pair at step t to the device hosting the expert."""
    routed = []
    active = trace.active_tokens(t)
    for layer, placement in enumerate(placements):
        selections = trace.step_layer(t, layer)
        on_gpu = placement.gpu_mask()[selections] & active[:, None]
        gpu_pairs = int(on_gpu.sum())
        total = int(active.sum()) * trace.shape.top_k
        routed.append(
            LayerRouting(
                t=t,
                layer=layer,
                gpu_pairs=gpu_pairs,
                cpu_pairs=total - gpu_pairs,
                on_gpu=on_gpu,
                active=active,
                selections=selections,
            )
        )
    return routed


@dataclass
class PolicyStats:
    """Running totals for one policy instance."""

    steps: int = 0
    refreshes: int = 0
    promotions: int = 0
    evictions: int = 0


class ExpertRefreshPolicy:
    """
    Per-layer expert placement that refreshes every `tau` steps.

    At a refresh step the GPU set becomes the top-B experts of the layer's hit
    counter (or of the upcoming window in oracle mode); then the step's own
    routing is accumulated. Per-step refresh is tau=1 and the static policy
    never refreshes after cold start.
    """

    def __init__(self, shape: ModelShape, config: PolicyConfig):
        config.validate_for(shape)
        self.shape = shape
        self.config = config
        self.interval = config.refresh_interval()
        self.placements: List[Placement] = []
        self.counters: List[HitCounter] = [
            HitCounter(shape.num_experts) for _ in range(shape.num_layers)
        ]
        self.trace: Optional[RoutingTrace] = None
        self.block = -1
        self.stats = PolicyStats()
        self.check_invariants = debug_checks_enabled()
        logger.debug(f"ExpertRefreshPolicy initialized: {config.label}")

    def begin_block(self, trace: RoutingTrace, carry_counters: bool = False) -> None:
        """Start a new block; the first block triggers the cold start."""
        self.trace = trace
        self.block += 1
        if not self.placements:
            self.placements = init_placement(self.shape, self.config, trace)
            return
        if self.config.counter_mode is CounterMode.GLOBAL or carry_counters:
            return
        for counter in self.counters:
            counter.reset(0)

    def is_refresh_step(self, t: int) -> bool:
        return self.interval is not None and t % self.interval == 0

    def _refresh_counts(self, layer: int, t: int) -> Optional[np.ndarray]:
        if self.config.refresh_mode is RefreshMode.ORACLE:
            end = min(t + self.interval, self.shape.block_size)
            return sum(self.trace.hit_counts(s, layer) for s in range(t, end))
        counter = self.counters[layer]
        if counter.is_empty():
            return None
        return counter.counts

    def step(self, t: int) -> List[StepDecision]:
        """Decide (and apply) the placement of every layer for step t."""
        refresh = self.is_refresh_step(t)
        decisions = []
        for layer in range(self.shape.num_layers):
            placement = self.placements[layer]
            promotions: Tuple[int, ...] = ()
            evictions: Tuple[int, ...] = ()
            if refresh:
                counts = self._refresh_counts(layer, t)
                # No hits yet: keep the current placement
                if counts is not None:
                    new = select_top_b(counts, self.shape.gpu_budget)
                    old = placement.frozen()
                    promotions = tuple(sorted(new - old))
                    evictions = tuple(sorted(old - new))
                    placement.swap(promotions, evictions)
                if self.config.counter_mode is CounterMode.WINDOWED:
                    self.counters[layer].reset(t)

            self.counters[layer].add(self.trace.hit_counts(t, layer))

            if self.check_invariants:
                placement.check()
                self.counters[layer].check()

            decisions.append(
                StepDecision(
                    t=t,
                    layer=layer,
                    refreshed=refresh,
                    promotions=promotions,
                    evictions=evictions,
                    placement_after=placement.frozen(),
                    block=self.block,
                )
            )
            self.stats.promotions += len(promotions)
            self.stats.evictions += len(evictions)

        self.stats.steps += 1
        if refresh:
            self.stats.refreshes += 1
            logger.debug(
                f"🔁 Refresh at block {self.block} step {t}: "
                f"{sum(d.migrations for d in decisions)} promotions"
            )
        return decisions

    def run_block(self, trace: RoutingTrace) -> List[List[StepDecision]]:
        """Step a whole block, returning decisions indexed [t][layer]."""
        self.begin_block(trace)
        return [self.step(t) for t in range(self.shape.block_size)]

    def get_stats(self) -> Dict[str, int]:
        return {
            "steps": self.stats.steps,
            "refreshes": self.stats.refreshes,
            "promotions": self.stats.promotions,
            "evictions": self.stats.evictions,
        }


def write_decisions_jsonl(decisions: Iterable[StepDecision], path: str) -> None:
    """One JSON object per (step, layer) decision."""
    lines = [json.dumps(d.to_record(), separators=(",", ":")) for d in decisions]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
