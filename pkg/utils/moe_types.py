#!/usr/bin/env python3
"""
Core Domain Types
Model shape, routing traces, per-layer placements, hit counters, hardware
profiles and policy configuration shared by every other module.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, Iterable, Optional, Sequence, Set, Tuple

import numpy as np

from utils.errors import (
    BudgetExceedsExperts,
    DimensionMismatch,
    DuplicateExpertInSelection,
    ExpertIdOutOfRange,
    InvalidProfile,
    InvalidShape,
    InvalidTau,
    LayerOutOfRange,
    PlacementInvariantViolation,
    ProvidedPlacementInvalid,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelShape:
    """Dimensions of one MoE model and one decoding block."""

    num_layers: int
    num_experts: int
    top_k: int
    gpu_budget: int
    block_size: int
    num_tokens: int

    def __post_init__(self):
        for name in (
            "num_layers",
            "num_experts",
            "top_k",
            "gpu_budget",
            "block_size",
            "num_tokens",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidShape(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise InvalidShape(f"{name} must be positive, got {value}")
        if self.top_k > self.num_experts:
            raise InvalidShape(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}"
            )
        if self.gpu_budget > self.num_experts:
            raise InvalidShape(
                f"gpu_budget={self.gpu_budget} exceeds num_experts={self.num_experts}"
            )

    def with_budget(self, gpu_budget: int) -> "ModelShape":
        return replace(self, gpu_budget=gpu_budget)

    def routing_dims(self) -> Tuple[int, int, int, int, int]:
        """(L, E, k, T, N): everything except the GPU budget."""
        return (
            self.num_layers,
            self.num_experts,
            self.top_k,
            self.block_size,
            self.num_tokens,
        )

    def check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.num_layers:
            raise LayerOutOfRange(
                f"layer {layer} out of range [0, {self.num_layers})"
            )

    def check_budget(self, budget: int) -> None:
        if budget < 1 or budget > self.num_experts:
            raise BudgetExceedsExperts(
                f"budget {budget} must lie in [1, {self.num_experts}]"
            )


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    """
    Router top-k selections for one block.

    selections has shape (T, L, N, k); active has shape (T, N) and marks the
    tokens that are routed at each step (decoded tokens may drop out).
    """

    shape: ModelShape
    selections: np.ndarray
    active: Optional[np.ndarray] = None

    def __post_init__(self):
        selections = np.array(self.selections, dtype=np.int64)
        selections.setflags(write=False)
        object.__setattr__(self, "selections", selections)

        if self.active is None:
            active = np.ones(
                (self.shape.block_size, self.shape.num_tokens), dtype=bool
            )
        else:
            active = np.array(self.active, dtype=bool)
        active.setflags(write=False)
        object.__setattr__(self, "active", active)

    @classmethod
    def from_nested(
        cls,
        shape: ModelShape,
        nested: Sequence,
        active: Optional[Sequence] = None,
    ) -> "RoutingTrace":
        """Build from nested lists indexed [t][l][n] -> list of k IDs."""
        _check_nested_dims(shape, nested)
        return cls(shape=shape, selections=np.array(nested, dtype=np.int64), active=active)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.selections, other.selections)
            and np.array_equal(self.active, other.active)
        )

    def __hash__(self):
        return hash((self.shape, self.selections.tobytes(), self.active.tobytes()))

    def step_layer(self, t: int, layer: int) -> np.ndarray:
        """(N, k) selections at one step and layer."""
        return self.selections[t, layer]

    def active_tokens(self, t: int) -> np.ndarray:
        return self.active[t]

    def hit_counts(self, t: int, layer: int) -> np.ndarray:
        """Per-expert token hits at (t, layer), active tokens only."""
        rows = self.selections[t, layer][self.active[t]]
        return np.bincount(rows.ravel(), minlength=self.shape.num_experts).astype(
            np.int64
        )

    def count_matrix(self, layer: int) -> np.ndarray:
        """(T, E) token-hit counts for one layer."""
        self.shape.check_layer(layer)
        return np.stack(
            [self.hit_counts(t, layer) for t in range(self.shape.block_size)]
        )

    def with_budget(self, gpu_budget: int) -> "RoutingTrace":
        return RoutingTrace(
            shape=self.shape.with_budget(gpu_budget),
            selections=self.selections,
            active=self.active,
        )


def _check_nested_dims(shape: ModelShape, nested: Sequence) -> None:
    T, L, N, k = shape.block_size, shape.num_layers, shape.num_tokens, shape.top_k
    if len(nested) != T:
        raise DimensionMismatch(f"expected {T} steps, got {len(nested)}")
    for t, layers in enumerate(nested):
        if len(layers) != L:
            raise DimensionMismatch(
                f"step {t}: expected {L} layers, got {len(layers)}"
            )
        for l, tokens in enumerate(layers):
            if len(tokens) != N:
                raise DimensionMismatch(
                    f"expected {N} tokens, got {len(tokens)}", (t, l, 0)
                )
            for n, experts in enumerate(tokens):
                if len(experts) != k:
                    raise DimensionMismatch(
                        f"expected {k} experts, got {len(experts)}", (t, l, n)
                    )


def validate(trace: RoutingTrace) -> bool:
    """
    Check every RoutingTrace invariant.

    Returns True when the trace is valid, otherwise raises the error for the
    first violating (t, l, n) in step-major order.
    """
    shape = trace.shape
    expected = (shape.block_size, shape.num_layers, shape.num_tokens, shape.top_k)
    sel = trace.selections
    if sel.ndim != 4 or sel.shape != expected:
        raise DimensionMismatch(
            f"selections shape {tuple(sel.shape)} != expected {expected}"
        )
    if trace.active.shape != (shape.block_size, shape.num_tokens):
        raise DimensionMismatch(
            f"active mask shape {tuple(trace.active.shape)} != "
            f"expected {(shape.block_size, shape.num_tokens)}"
        )

    out_of_range = ((sel < 0) | (sel >= shape.num_experts)).any(axis=-1)
    ordered = np.sort(sel, axis=-1)
    duplicated = (ordered[..., 1:] == ordered[..., :-1]).any(axis=-1)

    bad = out_of_range | duplicated
    if bad.any():
        t, l, n = (int(i) for i in np.argwhere(bad)[0])
        row = [int(e) for e in sel[t, l, n]]
        if out_of_range[t, l, n]:
            raise ExpertIdOutOfRange(
                f"selection {row} has an ID outside [0, {shape.num_experts})",
                (t, l, n),
            )
        raise DuplicateExpertInSelection(
            f"selection {row} repeats an expert", (t, l, n)
        )
    return True


def rank_top_b(counts: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the `budget` highest counts, ties to the lower ID, sorted ascending."""
    counts = np.asarray(counts)
    if budget < 1 or budget > counts.shape[0]:
        raise BudgetExceedsExperts(
            f"budget {budget} must lie in [1, {counts.shape[0]}]"
        )
    order = np.lexsort((np.arange(counts.shape[0]), -counts))
    return np.sort(order[:budget])


@dataclass
class Placement:
    """GPU/CPU partition of one layer's experts."""

    num_experts: int
    budget: int
    gpu_set: Set[int] = field(default_factory=set)

    def __post_init__(self):
        self.gpu_set = {int(e) for e in self.gpu_set}

    @property
    def cpu_set(self) -> Set[int]:
        return set(range(self.num_experts)) - self.gpu_set

    def gpu_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_experts, dtype=bool)
        if self.gpu_set:
            mask[list(self.gpu_set)] = True
        return mask

    def check(self) -> None:
        """Raise if the partition or budget invariant is broken."""
        if len(self.gpu_set) > self.budget:
            raise PlacementInvariantViolation(
                f"{len(self.gpu_set)} GPU experts exceed budget {self.budget}"
            )
        stray = [e for e in self.gpu_set if not 0 <= e < self.num_experts]
        if stray:
            raise PlacementInvariantViolation(
                f"GPU set holds unknown experts {sorted(stray)}"
            )
        if self.gpu_set & self.cpu_set:
            raise PlacementInvariantViolation("GPU and CPU sets overlap")
        if len(self.gpu_set) + len(self.cpu_set) != self.num_experts:
            raise PlacementInvariantViolation("GPU and CPU sets do not cover all experts")

    def swap(self, promotions: Iterable[int], evictions: Iterable[int]) -> None:
        self.gpu_set.difference_update(int(e) for e in evictions)
        self.gpu_set.update(int(e) for e in promotions)

    def snapshot(self) -> "Placement":
        return Placement(self.num_experts, self.budget, set(self.gpu_set))

    def frozen(self) -> FrozenSet[int]:
        return frozenset(self.gpu_set)


@dataclass
class HitCounter:
    """Per-expert token-hit counts accumulated since the last reset."""

    num_experts: int
    counts: np.ndarray = None
    window_start: int = 0
    steps_counted: int = 0
    pairs_counted: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.num_experts, dtype=np.int64)

    def add(self, step_counts: np.ndarray) -> None:
        """Accumulate one step's per-expert hits."""
        self.counts += step_counts
        self.steps_counted += 1
        self.pairs_counted += int(step_counts.sum())

    def reset(self, step: int) -> None:
        self.counts = np.zeros(self.num_experts, dtype=np.int64)
        self.window_start = step
        self.steps_counted = 0
        self.pairs_counted = 0

    def total(self) -> int:
        return int(self.counts.sum())

    def is_empty(self) -> bool:
        return self.steps_counted == 0

    def check(self) -> None:
        if (self.counts < 0).any():
            raise PlacementInvariantViolation("hit counter went negative")
        if self.total() != self.pairs_counted:
            raise PlacementInvariantViolation(
                f"hit counter total {self.total()} != counted pairs {self.pairs_counted}"
            )


@dataclass(frozen=True)
class HardwareProfile:
    """Calibration constants for the latency model (abstract time units)."""

    c_io: float
    c_cpu: float
    c_gpu: float
    io_overlap: bool = False

    def __post_init__(self):
        for name in ("c_io", "c_cpu", "c_gpu"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise InvalidProfile(f"{name} must be strictly positive, got {value}")
        if self.c_cpu < self.c_gpu:
            raise InvalidProfile(
                f"c_cpu={self.c_cpu} must not be below c_gpu={self.c_gpu}"
            )


class PolicyKind(Enum):
    """Expert placement policies."""

    TIDE = "tide"  # interval refresh every tau steps
    PER_STEP = "perstep"  # refresh at every step
    STATIC = "static"  # never refresh after initialization


class ColdStart(Enum):
    FIRST_B = "first-b"
    ORACLE_STEP0 = "oracle-step0"
    PROVIDED = "provided"


class CounterMode(Enum):
    """When the hit counter is cleared."""

    WINDOWED = "windowed"  # at every refresh
    BLOCK = "block"  # at block start only
    GLOBAL = "global"  # never


class RefreshMode(Enum):
    OBSERVED = "observed"  # counts from already decoded steps
    ORACLE = "oracle"  # counts from the upcoming refresh window


@dataclass(frozen=True)
class PolicyConfig:
    """Which policy to run and how it starts."""

    kind: PolicyKind
    tau: Optional[int] = None
    cold_start: ColdStart = ColdStart.FIRST_B
    provided: Optional[Tuple[FrozenSet[int], ...]] = None
    counter_mode: CounterMode = CounterMode.WINDOWED
    refresh_mode: RefreshMode = RefreshMode.OBSERVED

    def __post_init__(self):
        if self.kind is PolicyKind.TIDE:
            if self.tau is None or isinstance(self.tau, bool) or int(self.tau) < 1:
                raise InvalidTau(f"interval refresh needs tau >= 1, got {self.tau!r}")
        if self.cold_start is ColdStart.PROVIDED and self.provided is None:
            raise ProvidedPlacementInvalid("cold_start=provided needs a placement")
        if self.provided is not None:
            object.__setattr__(
                self, "provided", tuple(frozenset(int(e) for e in s) for s in self.provided)
            )

    @classmethod
    def tide(cls, tau: int, **kwargs) -> "PolicyConfig":
        return cls(kind=PolicyKind.TIDE, tau=tau, **kwargs)

    @classmethod
    def per_step(cls, **kwargs) -> "PolicyConfig":
        return cls(kind=PolicyKind.PER_STEP, **kwargs)

    @classmethod
    def static(cls, **kwargs) -> "PolicyConfig":
        return cls(kind=PolicyKind.STATIC, **kwargs)

    def refresh_interval(self) -> Optional[int]:
        """Steps between refreshes; None when the policy never refreshes."""
        if self.kind is PolicyKind.TIDE:
            return int(self.tau)
        if self.kind is PolicyKind.PER_STEP:
            return 1
        return None

    def validate_for(self, shape: ModelShape) -> None:
        if self.kind is PolicyKind.TIDE and int(self.tau) > shape.block_size:
            raise InvalidTau(
                f"tau={self.tau} exceeds block size T={shape.block_size}"
            )

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.TIDE:
            return f"tide(tau={self.tau})"
        return self.kind.value
