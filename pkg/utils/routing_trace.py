#!/usr/bin/env python3
"""
Routing Trace Utilities

Synthetic routing traces with controllable temporal locality, trace file
I/O, and the cross-step statistics used to reason about expert placement:
similarity heatmaps, unique experts per step and top-B drift.
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from utils.errors import (
    InvalidSpec,
    ParseError,
    SchemaVersionMismatch,
    TraceIoError,
    ValidationError,
)
from utils.moe_types import ModelShape, RoutingTrace, rank_top_b, validate
from utils.run_manifest import atomic_write_bytes, atomic_write_text, write_csv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TEXT_MAGIC = "# moe routing trace"
BINARY_MAGIC = b"MOETRACE"
BINARY_SUFFIX = ".tracebin"
_BINARY_HEADER = struct.Struct("<8sH6I")

# Share of still-masked draws taken from the layer's mask ranking when a
# decode schedule is given without an explicit affinity.
SCHEDULED_MASK_AFFINITY = 0.9


# ---------------------------------------------------------------------------
# Decode schedules
# ---------------------------------------------------------------------------


def decode_schedule(num_steps: int, num_tokens: int, fraction: float = 0.1) -> List[int]:
    """
    Cumulative decoded-token counts, length num_steps + 1.

    Emulates confidence-threshold decoding: each step finalizes a fixed
    fraction of the tokens still masked, and the last step finalizes the rest.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidSpec(f"decode fraction must lie in (0, 1], got {fraction}")
    schedule = [0]
    for t in range(1, num_steps):
        remaining = int(np.floor(num_tokens * (1.0 - fraction) ** t))
        schedule.append(max(schedule[-1], num_tokens - remaining))
    schedule.append(num_tokens)
    return schedule


def linear_decode_schedule(num_steps: int, num_tokens: int) -> List[int]:
    return [int(num_tokens * t // num_steps) for t in range(num_steps + 1)]


def schedule_increments(schedule: Sequence[int]) -> List[int]:
    """Tokens finalized at each step from a cumulative schedule."""
    return [int(schedule[t + 1] - schedule[t]) for t in range(len(schedule) - 1)]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenSpec:
    """Parameters of one synthetic routing trace."""

    shape: ModelShape
    persistence: float
    popularity_skew: float = 1.0
    seed: int = 0
    unmask_schedule: Optional[Tuple[int, ...]] = None
    freeze_decoded: bool = True
    mask_affinity: Optional[float] = None  # None: scheduled default

    def __post_init__(self):
        if self.unmask_schedule is not None:
            object.__setattr__(
                self, "unmask_schedule", tuple(int(v) for v in self.unmask_schedule)
            )

    def validate(self) -> None:
        if not 0.0 <= self.persistence <= 1.0:
            raise InvalidSpec(f"persistence must lie in [0, 1], got {self.persistence}")
        if self.popularity_skew < 0 or not np.isfinite(self.popularity_skew):
            raise InvalidSpec(
                f"popularity_skew must be non-negative, got {self.popularity_skew}"
            )
        if not 0.0 <= self.resolved_mask_affinity() <= 1.0:
            raise InvalidSpec(
                f"mask_affinity must lie in [0, 1], got {self.mask_affinity}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpec(f"seed must be a 64-bit unsigned integer, got {self.seed}")

        schedule = self.resolved_schedule()
        T, N = self.shape.block_size, self.shape.num_tokens
        if len(schedule) != T + 1:
            raise InvalidSpec(
                f"unmask_schedule needs {T + 1} entries (steps 0..T), got {len(schedule)}"
            )
        if schedule[0] != 0:
            raise InvalidSpec("unmask_schedule(0) must be 0")
        if any(b < a for a, b in zip(schedule, schedule[1:])):
            raise InvalidSpec("unmask_schedule must be non-decreasing")
        if schedule[-1] > N:
            raise InvalidSpec(f"unmask_schedule(T)={schedule[-1]} exceeds N={N}")

    def resolved_schedule(self) -> Tuple[int, ...]:
        """No token is frozen when no schedule was given."""
        if self.unmask_schedule is None:
            return tuple([0] * (self.shape.block_size + 1))
        return self.unmask_schedule

    def resolved_mask_affinity(self) -> float:
        if self.mask_affinity is not None:
            return float(self.mask_affinity)
        return SCHEDULED_MASK_AFFINITY if self.unmask_schedule is not None else 0.0

    def for_block(self, block: int) -> "GenSpec":
        """Same spec with the seed derived for a later block."""
        if block == 0:
            return self
        state = np.random.SeedSequence([int(self.seed), int(block)]).generate_state(
            1, dtype=np.uint64
        )
        return replace(self, seed=int(state[0]))


def zipf_weights(num_experts: int, skew: float) -> np.ndarray:
    ranks = np.arange(1, num_experts + 1, dtype=np.float64)
    return ranks ** (-float(skew))


def _permutation(rng: np.random.Generator, size: int) -> np.ndarray:
    return np.argsort(rng.random(size), kind="stable")


def _draw_excluding(
    rng: np.random.Generator,
    ranking: np.ndarray,
    inverse_ranking: np.ndarray,
    weights: np.ndarray,
    exclude: Sequence[int],
) -> int:
    """
    One Zipf draw over a preference ranking, never returning an excluded expert.

    When the remaining weights underflow to zero (very large skews) the draw
    falls back to uniform over the ranks that are still allowed.
    """
    allowed = np.ones(len(weights), dtype=bool)
    if len(exclude):
        allowed[inverse_ranking[np.asarray(exclude, dtype=np.int64)]] = False
    w = np.where(allowed, weights, 0.0)
    cdf = np.cumsum(w)
    total = cdf[-1]
    if not np.isfinite(total) or total <= 0.0:
        ranks = np.flatnonzero(allowed)
        pick = min(int(rng.random() * len(ranks)), len(ranks) - 1)
        return int(ranking[ranks[pick]])
    u = rng.random() * total
    rank = int(np.searchsorted(cdf, u, side="right"))
    if rank >= len(w) or w[rank] == 0.0:
        rank = int(np.flatnonzero(w)[-1])
    return int(ranking[rank])


def generate(spec: GenSpec) -> RoutingTrace:
    """
    Generate a routing trace from a GenSpec.

    Every (layer, token) has its own preference ranking over experts and
    fresh draws follow Zipf(popularity_skew) over that ranking. Tokens still
    masked draw from the layer's shared mask ranking with probability
    mask_affinity, so block starts route through a narrow expert set. At
    every later step each previous expert is kept with probability
    `persistence`; dropped experts are replaced by draws that avoid the
    token's current experts. With a positive affinity a token decoded at
    step t (unmask_schedule(t) <= n < unmask_schedule(t + 1)) draws its own k
    experts at t. Afterwards a decoded token repeats its selection, or drops
    out of routing when freeze_decoded is False. Unique experts per step
    therefore grow as decoding proceeds.

    Randomness comes from numpy's PCG64 seeded with spec.seed, consuming only
    its double stream, so the trace is a pure function of the spec.
    """
    spec.validate()
    shape = spec.shape
    T, L, N, E, k = (
        shape.block_size,
        shape.num_layers,
        shape.num_tokens,
        shape.num_experts,
        shape.top_k,
    )
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    weights = zipf_weights(E, spec.popularity_skew)
    schedule = spec.resolved_schedule()
    affinity = spec.resolved_mask_affinity()

    mask_rankings = np.stack([_permutation(rng, E) for _ in range(L)])
    rankings = np.stack(
        [np.stack([_permutation(rng, E) for _ in range(N)]) for _ in range(L)]
    )
    inverse_mask = np.argsort(mask_rankings, axis=-1)
    inverse = np.argsort(rankings, axis=-1)

    def draw(l: int, n: int, exclude: List[int], masked: bool) -> int:
        if masked and affinity > 0.0 and rng.random() < affinity:
            return _draw_excluding(rng, mask_rankings[l], inverse_mask[l], weights, exclude)
        return _draw_excluding(rng, rankings[l, n], inverse[l, n], weights, exclude)

    def fresh(l: int, n: int, masked: bool) -> List[int]:
        chosen: List[int] = []
        for _ in range(k):
            chosen.append(draw(l, n, chosen, masked))
        return chosen

    selections = np.empty((T, L, N, k), dtype=np.int64)
    active = np.ones((T, N), dtype=bool)

    for l in range(L):
        for n in range(N):
            selections[0, l, n] = fresh(l, n, masked=n >= schedule[1])

    for t in range(1, T):
        decoded, finalizing = schedule[t], schedule[t + 1]
        selections[t] = selections[t - 1]
        if decoded and not spec.freeze_decoded:
            active[t, :decoded] = False
        for l in range(L):
            for n in range(decoded, N):
                masked = n >= finalizing
                if not masked and affinity > 0.0:
                    selections[t, l, n] = fresh(l, n, masked=False)
                    continue
                previous = selections[t - 1, l, n]
                keep = rng.random(k) < spec.persistence
                if keep.all():
                    continue
                current = [int(e) for e in previous[keep]]
                row = previous.copy()
                for j in np.flatnonzero(~keep):
                    expert = draw(l, n, current, masked)
                    row[j] = expert
                    current.append(expert)
                selections[t, l, n] = row

    trace = RoutingTrace(shape=shape, selections=selections, active=active)
    logger.debug(
        f"🎲 Generated trace L={L} E={E} k={k} T={T} N={N} p={spec.persistence} "
        f"affinity={affinity} seed={spec.seed}"
    )
    return trace


def generate_blocks(spec: GenSpec, blocks: int) -> List[RoutingTrace]:
    return [generate(spec.for_block(b)) for b in range(blocks)]


def drop_decoded(trace: RoutingTrace, schedule: Sequence[int]) -> RoutingTrace:
    """Copy of a trace in which tokens below schedule[t] no longer route at step t."""
    T, N = trace.shape.block_size, trace.shape.num_tokens
    if len(schedule) != T + 1 or schedule[0] != 0 or schedule[-1] > N:
        raise InvalidSpec(f"decode schedule must run 0..<=N over {T + 1} entries")
    if any(b < a for a, b in zip(schedule, schedule[1:])):
        raise InvalidSpec("decode schedule must be non-decreasing")
    active = trace.active.copy()
    for t in range(T):
        active[t, : schedule[t]] = False
    return RoutingTrace(shape=trace.shape, selections=trace.selections, active=active)


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """T x T cosine similarity of per-step expert hit-count vectors."""

    values: np.ndarray
    layer: Optional[int]  # None when averaged over layers

    @property
    def averaged(self) -> bool:
        return self.layer is None


@dataclass(frozen=True)
class DriftSeries:
    """Per-step top-B drift d_t for t = 1..T-1 and its mean."""

    layer: Optional[int]  # None when averaged over layers
    budget: int
    values: Tuple[float, ...]
    mean: float


def _cosine_matrix(counts: np.ndarray) -> np.ndarray:
    counts = counts.astype(np.float64)
    norms = np.linalg.norm(counts, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = counts / safe[:, None]
    values = unit @ unit.T
    empty = norms == 0
    values[empty, :] = 0.0
    values[:, empty] = 0.0
    np.fill_diagonal(values, np.where(empty, 0.0, 1.0))
    values = np.clip(values, 0.0, 1.0)
    return (values + values.T) / 2.0


def similarity_matrix(trace: RoutingTrace, layer: Optional[int] = None) -> SimilarityMatrix:
    """
    Cosine similarity between the per-step expert hit-count vectors.

    layer=None averages the per-layer matrices over all layers.
    """
    if layer is not None:
        return SimilarityMatrix(_cosine_matrix(trace.count_matrix(layer)), layer)
    per_layer = [
        _cosine_matrix(trace.count_matrix(l)) for l in range(trace.shape.num_layers)
    ]
    return SimilarityMatrix(np.mean(per_layer, axis=0), None)


def band_similarity(trace: RoutingTrace, layer: Optional[int] = None, offset: int = 1) -> float:
    """Mean of values[t][t + offset] over all valid t."""
    values = similarity_matrix(trace, layer).values
    band = np.diagonal(values, offset=offset)
    return float(band.mean()) if band.size else float("nan")


def mean_adjacent_similarity(trace: RoutingTrace, layer: Optional[int] = None) -> float:
    return band_similarity(trace, layer, offset=1)


def unique_experts_per_step(trace: RoutingTrace, layer: int) -> List[int]:
    counts = trace.count_matrix(layer)
    return [int(v) for v in (counts > 0).sum(axis=1)]


def unique_experts_trend(trace: RoutingTrace, layer: int) -> float:
    """Spearman correlation between step index and unique-expert count (0 when flat)."""
    unique = unique_experts_per_step(trace, layer)
    if len(set(unique)) < 2:
        return 0.0
    rho = stats.spearmanr(np.arange(len(unique)), unique).statistic
    return float(rho)


def drift_rate(trace: RoutingTrace, layer: int, budget: int) -> DriftSeries:
    """d_t = |top-B(t) minus top-B(t-1)| / B, top-B by step hit counts."""
    trace.shape.check_layer(layer)
    trace.shape.check_budget(budget)
    counts = trace.count_matrix(layer)
    previous = set(rank_top_b(counts[0], budget).tolist())
    values = []
    for t in range(1, trace.shape.block_size):
        current = set(rank_top_b(counts[t], budget).tolist())
        values.append(len(current - previous) / budget)
        previous = current
    mean = float(np.mean(values)) if values else 0.0
    return DriftSeries(layer=layer, budget=budget, values=tuple(values), mean=mean)


def mean_drift(trace: RoutingTrace, budget: int) -> float:
    """Mean drift over all layers."""
    return float(
        np.mean(
            [drift_rate(trace, l, budget).mean for l in range(trace.shape.num_layers)]
        )
    )


def mean_drift_series(trace: RoutingTrace, budget: int) -> Tuple[float, ...]:
    """Per-step drift averaged over layers."""
    series = np.mean(
        [drift_rate(trace, l, budget).values for l in range(trace.shape.num_layers)],
        axis=0,
    )
    return tuple(float(v) for v in np.atleast_1d(series))


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def _scope(layer: Optional[int]) -> str:
    return "all-layers-mean" if layer is None else f"layer-{layer}"


def write_similarity_csv(matrix: SimilarityMatrix, path: str) -> None:
    scope = _scope(matrix.layer)
    T = matrix.values.shape[0]
    rows = (
        (t, s, float(matrix.values[t, s])) for t in range(T) for s in range(T)
    )
    write_csv(path, f"similarity/{SCHEMA_VERSION};scope={scope}", ["t", "s", "value"], rows)


def write_drift_csv(series: DriftSeries, path: str) -> None:
    rows = ((t, value) for t, value in enumerate(series.values, start=1))
    write_csv(
        path,
        f"drift/{SCHEMA_VERSION};scope={_scope(series.layer)};budget={series.budget}",
        ["t", "d_t"],
        rows,
    )


def write_unique_csv(unique: Sequence[float], layer: Optional[int], path: str) -> None:
    write_csv(
        path,
        f"unique-experts/{SCHEMA_VERSION};scope={_scope(layer)}",
        ["t", "unique"],
        enumerate(unique),
    )


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

_HEADER_KEYS = (
    "num_layers",
    "num_experts",
    "top_k",
    "gpu_budget",
    "block_size",
    "num_tokens",
)
_REQUIRED_HEADER_KEYS = tuple(key for key in _HEADER_KEYS if key != "gpu_budget")


def default_gpu_budget(num_experts: int) -> int:
    """Budget assumed for traces whose header does not record one."""
    return max(1, num_experts // 4)


def _header_shape(dims: Dict[str, int], path: str) -> ModelShape:
    try:
        return ModelShape(**dims)
    except ValidationError as e:
        raise ParseError(f"{path}: bad header dimensions: {e}")


def _render_text(trace: RoutingTrace) -> str:
    shape = trace.shape
    lines = [TEXT_MAGIC, f"schema_version={SCHEMA_VERSION}"]
    lines += [f"{key}={getattr(shape, key)}" for key in _HEADER_KEYS]
    lines.append("# t l n active experts...")
    for t in range(shape.block_size):
        flags = trace.active[t]
        for l in range(shape.num_layers):
            rows = trace.selections[t, l]
            for n in range(shape.num_tokens):
                ids = " ".join(str(int(e)) for e in rows[n])
                lines.append(f"{t} {l} {n} {int(flags[n])} {ids}")
    return "\n".join(lines) + "\n"


def _parse_text(text: str, path: str) -> RoutingTrace:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TEXT_MAGIC:
        raise ParseError(f"{path}: not a routing trace file")

    header: Dict[str, int] = {}
    body_start = len(lines)
    for idx, raw in enumerate(lines[1:], start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            body_start = idx
            break
        key, value = line.split("=", 1)
        try:
            header[key.strip()] = int(value)
        except ValueError:
            raise ParseError(f"{path}:{idx + 1}: bad header value {raw!r}")

    version = header.get("schema_version")
    if version is None:
        raise ParseError(f"{path}: missing schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema_version={version}, expected {SCHEMA_VERSION}"
        )
    missing = [key for key in _REQUIRED_HEADER_KEYS if key not in header]
    if missing:
        raise ParseError(f"{path}: header missing {', '.join(missing)}")
    if "gpu_budget" not in header:
        header["gpu_budget"] = default_gpu_budget(header["num_experts"])
        logger.info(f"ℹ️ {path}: no gpu_budget in header, using {header['gpu_budget']}")

    shape = _header_shape({key: header[key] for key in _HEADER_KEYS}, path)
    T, L, N, k = shape.block_size, shape.num_layers, shape.num_tokens, shape.top_k
    body = [
        line for line in lines[body_start:] if line.strip() and not line.startswith("#")
    ]
    expected = T * L * N
    if len(body) != expected:
        raise ParseError(f"{path}: expected {expected} records, found {len(body)}")

    selections = np.empty((T, L, N, k), dtype=np.int64)
    active = np.ones((T, N), dtype=bool)
    record = 0
    for t in range(T):
        for l in range(L):
            for n in range(N):
                fields = body[record].split()
                record += 1
                try:
                    values = [int(v) for v in fields]
                except ValueError:
                    raise ParseError(f"{path}: non-integer record {body[record - 1]!r}")
                if len(values) != 4 + k or values[:3] != [t, l, n]:
                    raise ParseError(
                        f"{path}: record {record} should be (t={t}, l={l}, n={n}) "
                        f"with {k} experts, got {body[record - 1]!r}"
                    )
                flag = bool(values[3])
                if l == 0:
                    active[t, n] = flag
                elif active[t, n] != flag:
                    raise ParseError(
                        f"{path}: active flag of token {n} at step {t} differs across layers"
                    )
                try:
                    selections[t, l, n] = values[4:]
                except (OverflowError, ValueError):
                    raise ParseError(
                        f"{path}: record {record} has an expert ID outside int64: {body[record - 1]!r}"
                    )
    return RoutingTrace(shape=shape, selections=selections, active=active)


def _render_binary(trace: RoutingTrace) -> bytes:
    shape = trace.shape
    header = _BINARY_HEADER.pack(
        BINARY_MAGIC, SCHEMA_VERSION, *(getattr(shape, key) for key in _HEADER_KEYS)
    )
    return (
        header
        + trace.active.astype(np.uint8).tobytes()
        + trace.selections.astype("<i4").tobytes()
    )


def _parse_binary(data: bytes, path: str) -> RoutingTrace:
    if len(data) < _BINARY_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, *dims = _BINARY_HEADER.unpack_from(data)
    if magic != BINARY_MAGIC:
        raise ParseError(f"{path}: not a binary routing trace")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema_version={version}, expected {SCHEMA_VERSION}"
        )
    shape = _header_shape(dict(zip(_HEADER_KEYS, dims)), path)
    T, L, N, k = shape.block_size, shape.num_layers, shape.num_tokens, shape.top_k
    active_size = T * N
    sel_size = T * L * N * k * 4
    offset = _BINARY_HEADER.size
    if len(data) != offset + active_size + sel_size:
        raise ParseError(
            f"{path}: expected {offset + active_size + sel_size} bytes, found {len(data)}"
        )
    active = np.frombuffer(data, dtype=np.uint8, count=active_size, offset=offset)
    selections = np.frombuffer(
        data, dtype="<i4", count=T * L * N * k, offset=offset + active_size
    )
    return RoutingTrace(
        shape=shape,
        selections=selections.reshape(T, L, N, k).astype(np.int64),
        active=active.reshape(T, N).astype(bool),
    )


def save_trace(trace: RoutingTrace, path: str) -> None:
    """Write a trace; `.tracebin` selects the binary variant, anything else text."""
    validate(trace)
    if Path(path).suffix == BINARY_SUFFIX:
        atomic_write_bytes(path, _render_binary(trace))
    else:
        atomic_write_text(path, _render_text(trace))
    logger.info(f"💾 Saved trace {path}")


def load_trace(path: str) -> RoutingTrace:
    """Read and validate a trace written by save_trace (or captured externally)."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise TraceIoError(f"Cannot read trace {path}: {e}")

    if data.startswith(BINARY_MAGIC):
        trace = _parse_binary(data, path)
    else:
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{path}: not UTF-8 text")
        trace = _parse_text(text, path)
    validate(trace)
    return trace
