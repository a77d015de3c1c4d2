#!/usr/bin/env python3
"""
Trace Commands
gen-trace writes a synthetic routing trace; analyze exports the similarity
heatmap, unique experts per step and top-B drift of a trace.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from routers.common import CommandResult, require_seed
from utils.moe_types import ModelShape
from utils.routing_trace import (
    DriftSeries,
    GenSpec,
    band_similarity,
    decode_schedule,
    default_gpu_budget,
    drift_rate,
    generate,
    load_trace,
    mean_adjacent_similarity,
    mean_drift_series,
    save_trace,
    similarity_matrix,
    unique_experts_per_step,
    unique_experts_trend,
    write_drift_csv,
    write_similarity_csv,
    write_unique_csv,
)
from utils.run_manifest import atomic_write_text

logger = logging.getLogger(__name__)


class GenTraceRequest(BaseModel):
    """gen-trace flags; they map one to one onto GenSpec."""

    experts: int = Field(ge=1)
    topk: int = Field(ge=1)
    tokens: int = Field(ge=1)
    steps: int = Field(ge=1)
    layers: int = Field(default=1, ge=1)
    budget: Optional[int] = Field(default=None, ge=1)
    persistence: float = Field(ge=0.0, le=1.0)
    skew: float = Field(default=1.0, ge=0.0)
    seed: Optional[int] = Field(default=None, ge=0)
    decode_fraction: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    drop_decoded: bool = False
    mask_affinity: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    output: str


def gen_trace(request: GenTraceRequest) -> CommandResult:
    seed = require_seed(request.seed)
    shape = ModelShape(
        num_layers=request.layers,
        num_experts=request.experts,
        top_k=request.topk,
        gpu_budget=request.budget or default_gpu_budget(request.experts),
        block_size=request.steps,
        num_tokens=request.tokens,
    )
    schedule = None
    if request.decode_fraction is not None:
        schedule = decode_schedule(request.steps, request.tokens, request.decode_fraction)
    spec = GenSpec(
        shape=shape,
        persistence=request.persistence,
        popularity_skew=request.skew,
        seed=seed,
        unmask_schedule=schedule,
        freeze_decoded=not request.drop_decoded,
        mask_affinity=request.mask_affinity,
    )
    trace = generate(spec)
    save_trace(trace, request.output)
    return CommandResult(
        command="gen-trace",
        outputs=[request.output],
        seeds={"seed": seed},
        summary={
            "layers": shape.num_layers,
            "experts": shape.num_experts,
            "top_k": shape.top_k,
            "steps": shape.block_size,
            "tokens": shape.num_tokens,
            "mean_adjacent_similarity": mean_adjacent_similarity(trace),
        },
    )


class AnalyzeRequest(BaseModel):
    """analyze flags; without --layer every statistic is averaged over layers."""

    trace: str
    layer: Optional[int] = Field(default=None, ge=0)
    budget: Optional[int] = Field(default=None, ge=1)
    band: int = Field(default=5, ge=1)
    output_dir: str


def analyze(request: AnalyzeRequest) -> CommandResult:
    trace = load_trace(request.trace)
    shape = trace.shape
    out = Path(request.output_dir)
    outputs = []

    matrix = similarity_matrix(trace, request.layer)
    path = str(out / "similarity.csv")
    write_similarity_csv(matrix, path)
    outputs.append(path)

    layers = [request.layer] if request.layer is not None else range(shape.num_layers)
    unique = np.mean([unique_experts_per_step(trace, l) for l in layers], axis=0)
    unique_values = [int(v) if float(v).is_integer() else float(v) for v in unique]
    path = str(out / "unique_experts.csv")
    write_unique_csv(unique_values, request.layer, path)
    outputs.append(path)

    summary = {
        "scope": "all-layers-mean" if request.layer is None else f"layer-{request.layer}",
        "mean_adjacent_similarity": mean_adjacent_similarity(trace, request.layer),
        "band_similarity": band_similarity(trace, request.layer, request.band)
        if request.band < shape.block_size
        else None,
        "unique_experts_trend": float(
            np.mean([unique_experts_trend(trace, l) for l in layers])
        ),
    }

    if request.budget is not None:
        if request.layer is not None:
            series = drift_rate(trace, request.layer, request.budget)
        else:
            values = mean_drift_series(trace, request.budget) if shape.block_size > 1 else ()
            series = DriftSeries(
                layer=None,
                budget=request.budget,
                values=values,
                mean=float(np.mean(values)) if values else 0.0,
            )
        path = str(out / "drift.csv")
        write_drift_csv(series, path)
        outputs.append(path)
        summary["mean_drift"] = series.mean

    path = str(out / "summary.json")
    atomic_write_text(path, json.dumps(summary, indent=2))
    outputs.append(path)
    return CommandResult(
        command="analyze", outputs=outputs, inputs=[request.trace], summary=summary
    )
