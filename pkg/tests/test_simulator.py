#!/usr/bin/env python3
"""
Test Trace-Driven Simulator
Per-step pricing, multi-block runs, comparisons, sweeps and report export.
"""

import json
from collections import Counter
from dataclasses import replace

import pytest

from utils.errors import (
    IncompatibleConfigs,
    InvalidSpec,
    LayerOutOfRange,
    ShapeMismatch,
    TraceExhausted,
)
from utils.moe_types import (
    ColdStart,
    HardwareProfile,
    ModelShape,
    PolicyConfig,
    RefreshMode,
    RoutingTrace,
)
from utils.routing_trace import GenSpec, generate
from utils.simulator import (
    SimConfig,
    aggregate_steps,
    best_placement_hit_rate,
    compare,
    fan_out,
    per_layer_report,
    random_taus,
    run,
    sweep_taus,
    write_comparison_csv,
    write_report_csv,
    write_report_json,
)


@pytest.fixture
def shift_trace():
    shape = ModelShape(num_layers=1, num_experts=4, top_k=1, gpu_budget=1, block_size=4, num_tokens=2)
    return RoutingTrace.from_nested(
        shape, [[[[0], [1]]], [[[1], [1]]], [[[1], [2]]], [[[2], [2]]]]
    )


@pytest.fixture
def shift_config(shift_trace, profile):
    return SimConfig(
        shape=shift_trace.shape,
        policy=PolicyConfig.tide(2),
        profile=profile,
        traces=(shift_trace,),
        decode_schedule=(0, 1, 1, 2, 2),
    )


class TestRun:
    """Test cases for a single simulation run."""

    def test_hand_priced_run(self, shift_config):
        """Test per-step counts and latency on the hand-built trace."""
        report = run(shift_config)
        assert report.policy == "tide(tau=2)"
        assert [s.gpu_pairs for s in report.per_step] == [1, 0, 1, 0]
        assert [s.migrations for s in report.per_step] == [0, 0, 1, 0]
        assert [s.cost.total for s in report.per_step] == [20.0, 40.0, 40.0, 40.0]
        assert [s.tokens_decoded for s in report.per_step] == [1, 0, 1, 0]

        agg = report.aggregate
        assert agg.total_time == 140.0
        assert agg.tokens_decoded == 2
        assert agg.throughput == pytest.approx(2 / 140)
        assert agg.gpu_hit_rate == 0.25
        assert agg.migrations == 1
        assert agg.refreshes == 2
        assert agg.throughput_label == "FFN-bound throughput"

    def test_static_run(self, shift_config):
        report = run(shift_config.with_policy(PolicyConfig.static()))
        assert report.aggregate.migrations == 0
        assert report.aggregate.gpu_pairs == 1
        assert report.aggregate.total_time == 20.0 + 40.0 * 3

    def test_overlapped_profile_is_never_slower(self, shift_config):
        overlapped = HardwareProfile(c_io=20.0, c_cpu=20.0, c_gpu=1.0, io_overlap=True)
        serial = run(shift_config).aggregate.total_time
        parallel = run(replace(shift_config, profile=overlapped)).aggregate.total_time
        assert parallel <= serial

    def test_default_decode_schedule(self, small_shape, small_trace, profile):
        """Test every token is decoded by the end of the block."""
        config = SimConfig(shape=small_shape, policy=PolicyConfig.per_step(), profile=profile, traces=(small_trace,))
        report = run(config)
        assert report.aggregate.tokens_decoded == small_shape.num_tokens
        assert config.describe()["decode_schedule"][-1] == small_shape.num_tokens

    def test_bad_decode_schedule(self, shift_config):
        config = replace(shift_config, decode_schedule=(0, 2, 1, 2, 2))
        with pytest.raises(InvalidSpec):
            run(config)

    def test_layers_add_up(self, small_shape, small_trace, profile):
        """Test per-step totals are the sum of the per-layer reports."""
        config = SimConfig(shape=small_shape, policy=PolicyConfig.tide(2), profile=profile, traces=(small_trace,))
        report = run(config)
        for t, step in enumerate(report.per_step):
            layers = [per_layer_report(report, l)[t] for l in range(small_shape.num_layers)]
            assert step.gpu_pairs == sum(s.gpu_pairs for s in layers)
            assert step.migrations == sum(s.migrations for s in layers)
            assert step.cost.total == pytest.approx(sum(s.cost.total for s in layers))
        with pytest.raises(LayerOutOfRange):
            per_layer_report(report, small_shape.num_layers)

    def test_budget_override(self, shift_config):
        """Test traces are re-budgeted to the configured B."""
        report = run(shift_config.with_budget(4))
        assert report.aggregate.gpu_hit_rate == 1.0
        assert report.shape.gpu_budget == 4

    def test_decisions_are_recorded(self, small_shape, small_trace, profile):
        config = SimConfig(
            shape=small_shape,
            policy=PolicyConfig.tide(3),
            profile=profile,
            traces=(small_trace,),
            record_decisions=True,
        )
        report = run(config)
        assert len(report.decisions) == small_shape.block_size * small_shape.num_layers
        assert report.assignments is None


class TestMultiBlock:
    """Test cases for runs over several blocks."""

    def test_explicit_traces(self, shift_config, shift_trace):
        config = replace(shift_config, traces=(shift_trace, shift_trace), blocks=2)
        report = run(config)
        assert len(report.per_step) == 8
        assert [s.block for s in report.per_step] == [0] * 4 + [1] * 4
        assert [s.csv_row(4)[0] for s in report.per_step] == list(range(8))

    def test_trace_exhausted(self, shift_config):
        config = replace(shift_config, blocks=2)
        with pytest.raises(TraceExhausted):
            run(config)

    def test_shape_mismatch(self, shift_config, small_trace):
        config = replace(shift_config, traces=(small_trace,))
        with pytest.raises(ShapeMismatch):
            run(config)

    def test_generated_blocks(self, small_shape, profile):
        """Test generated multi-block runs are reproducible."""
        spec = GenSpec(shape=small_shape, persistence=0.8, seed=5)
        config = SimConfig(
            shape=small_shape, policy=PolicyConfig.tide(2), profile=profile, gen_spec=spec, blocks=3
        )
        first, second = run(config), run(config)
        assert len(first.per_step) == 3 * small_shape.block_size
        assert first.per_step == second.per_step
        assert first.aggregate == second.aggregate


class TestLosslessness:
    """Test cases for the placement-only guarantee."""

    def test_assignments_identical_across_policies(self, small_shape, small_trace, profile):
        """Test every policy serves the same (step, layer, token, expert) pairs."""
        base = SimConfig(
            shape=small_shape,
            policy=PolicyConfig.static(),
            profile=profile,
            traces=(small_trace,),
            record_assignments=True,
        )
        policies = [PolicyConfig.static(), PolicyConfig.per_step(), PolicyConfig.tide(2), PolicyConfig.tide(5)]
        multisets = [Counter(run(base.with_policy(p)).assignments) for p in policies]
        assert all(m == multisets[0] for m in multisets)
        assert sum(multisets[0].values()) == (
            small_shape.block_size * small_shape.num_layers * small_shape.num_tokens * small_shape.top_k
        )


class TestPolicyIdentities:
    """Test cases for policies that must coincide or reach a known bound."""

    def test_interval_one_matches_per_step(self, small_shape, small_trace, profile):
        """Test tide at tau=1 reproduces PerStep; only the policy label differs."""
        base = SimConfig(
            shape=small_shape,
            policy=PolicyConfig.per_step(),
            profile=profile,
            traces=(small_trace,),
            record_decisions=True,
        )
        per_step = run(base)
        tide = run(base.with_policy(PolicyConfig.tide(1)))
        assert tide.per_step == per_step.per_step
        assert tide.per_layer == per_step.per_layer
        assert tide.aggregate == per_step.aggregate
        assert tide.decisions == per_step.decisions
        assert (tide.policy, per_step.policy) == ("tide(tau=1)", "perstep")

    @pytest.mark.parametrize("seed", range(10))
    def test_oracle_every_step_reaches_best_placement(self, small_shape, profile, seed):
        trace = generate(GenSpec(shape=small_shape, persistence=0.6, seed=seed))
        config = SimConfig(
            shape=small_shape,
            policy=PolicyConfig.tide(1, refresh_mode=RefreshMode.ORACLE),
            profile=profile,
            traces=(trace,),
        )
        best = best_placement_hit_rate(trace, small_shape.gpu_budget)
        assert run(config).aggregate.gpu_hit_rate == pytest.approx(best, abs=1e-12)

    @pytest.mark.parametrize(
        "policy",
        [
            PolicyConfig.per_step(cold_start=ColdStart.ORACLE_STEP0),
            PolicyConfig.tide(3, cold_start=ColdStart.ORACLE_STEP0),
            PolicyConfig.static(cold_start=ColdStart.ORACLE_STEP0),
        ],
    )
    def test_frozen_routing_never_migrates(self, profile, policy):
        """Test p=1 routing that fits the budget runs entirely on the GPU."""
        shape = ModelShape(num_layers=2, num_experts=16, top_k=2, gpu_budget=8, block_size=6, num_tokens=3)
        trace = generate(GenSpec(shape=shape, persistence=1.0, seed=4))
        agg = run(SimConfig(shape=shape, policy=policy, profile=profile, traces=(trace,))).aggregate
        assert agg.migrations == 0
        assert agg.cpu_pairs == 0
        assert agg.gpu_hit_rate == 1.0
        assert agg.gpu_pairs == shape.block_size * shape.num_layers * shape.num_tokens * shape.top_k
        assert agg.total_time == pytest.approx(profile.c_gpu * agg.gpu_pairs)


class TestCompare:
    """Test cases for policy comparison tables."""

    def test_speedups(self, shift_config):
        """Test speedups are throughput ratios against the baseline row."""
        cheap_io = replace(shift_config, profile=HardwareProfile(c_io=2.0, c_cpu=20.0, c_gpu=1.0))
        configs = [
            cheap_io.with_policy(PolicyConfig.static()),
            cheap_io.with_policy(PolicyConfig.per_step()),
            cheap_io,
        ]
        table = compare(configs, baseline=0, jobs=3)
        assert table.baseline == "static"
        assert table.row("static").speedup == 1.0
        assert table.row("tide(tau=2)").speedup == pytest.approx(140.0 / 122.0)
        assert table.row("perstep").speedup == pytest.approx(140.0 / 122.0)
        assert "FFN-bound throughput" in table.format()

    def test_different_traces_are_rejected(self, shift_config, shift_trace):
        other = RoutingTrace(shift_trace.shape, shift_trace.selections[::-1].copy())
        configs = [shift_config, replace(shift_config, traces=(other,))]
        with pytest.raises(IncompatibleConfigs):
            compare(configs)

    def test_empty_and_bad_baseline(self, shift_config):
        with pytest.raises(IncompatibleConfigs):
            compare([])
        with pytest.raises(IncompatibleConfigs):
            compare([shift_config], baseline=1)

    def test_comparison_csv(self, shift_config, tmp_path):
        table = compare([shift_config.with_policy(PolicyConfig.static()), shift_config])
        path = tmp_path / "compare.csv"
        write_comparison_csv(table, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "# schema=comparison/2;baseline=static"
        assert lines[1].split(",")[0] == "policy"
        assert lines[3].startswith("tide(tau=2),1,4,")


class TestSweeps:
    """Test cases for tau sweeps and helpers."""

    def test_fan_out_keeps_order(self):
        assert fan_out(lambda x: x * x, range(10), jobs=4) == [x * x for x in range(10)]

    def test_sweep_taus(self, shift_config):
        reports = sweep_taus(shift_config.with_policy(PolicyConfig.static()), [1, 2, 3], jobs=2)
        assert [r.policy for r in reports] == ["tide(tau=1)", "tide(tau=2)", "tide(tau=3)"]

    def test_random_taus(self):
        taus = random_taus(32, 10, seed=4)
        assert len(taus) == 10
        assert all(1 <= tau <= 31 for tau in taus)
        assert taus == random_taus(32, 10, seed=4)

    def test_best_placement_bounds_policies(self, shift_config, shift_trace):
        """Test no policy beats the per-step best subset."""
        best = best_placement_hit_rate(shift_trace, 1)
        assert best == 0.75
        for policy in (PolicyConfig.static(), PolicyConfig.per_step(), PolicyConfig.tide(2)):
            assert run(shift_config.with_policy(policy)).aggregate.gpu_hit_rate <= best

    def test_empty_aggregate(self):
        agg = aggregate_steps([])
        assert agg.throughput == 0.0
        assert agg.gpu_hit_rate == 1.0


class TestReportExport:
    """Test cases for report files."""

    def test_csv(self, shift_config, tmp_path):
        path = tmp_path / "steps.csv"
        write_report_csv(run(shift_config), str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "# schema=sim-steps/1"
        assert lines[1] == "t,gpu_pairs,cpu_pairs,migrations,gpu_time,cpu_time,io_time,total"
        assert lines[4] == "2,1,1,1,1.0,20.0,20.0,40.0"

    def test_json(self, shift_config, tmp_path):
        path = tmp_path / "report.json"
        write_report_json(run(shift_config), str(path))
        document = json.loads(path.read_text())
        assert document["schema_version"] == "sim-report/1"
        assert document["throughput_label"] == "FFN-bound throughput"
        assert document["aggregate"]["total_time"] == 140.0
        assert len(document["per_step"]) == 4
        assert document["per_layer"][0][2]["layer"] == 0

    def test_byte_identical_reruns(self, shift_config, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        write_report_csv(run(shift_config), str(first))
        write_report_csv(run(shift_config), str(second))
        assert first.read_bytes() == second.read_bytes()
