#!/usr/bin/env python3
"""
Test Sweep Runner
Policy spec parsing and comparison grids over budgets, decode fractions and traces.
"""

import pytest

from collectors.sweep_runner import (
    PolicySpec,
    SweepRunner,
    merge_tables,
    parse_fraction_list,
    parse_int_list,
    parse_policies,
)
from utils.errors import BudgetExceedsExperts, ValidationError
from utils.moe_types import ColdStart, PolicyKind


class TestPolicySpec:
    """Test cases for the policy grammar."""

    def test_fixed_interval(self):
        spec = PolicySpec.parse("tide:4")
        assert spec.kind is PolicyKind.TIDE
        assert not spec.is_auto
        config = spec.to_config(ColdStart.FIRST_B)
        assert config.tau == 4
        assert config.cold_start is ColdStart.FIRST_B

    def test_auto_interval_with_cold_start(self):
        spec = PolicySpec.parse(" tide:auto@oracle-step0 ")
        assert spec.is_auto
        assert spec.cold_start is ColdStart.ORACLE_STEP0
        assert spec.to_config(ColdStart.FIRST_B, tau=7).tau == 7
        assert spec.to_config(ColdStart.FIRST_B, tau=7).cold_start is ColdStart.ORACLE_STEP0

    def test_baselines(self):
        assert PolicySpec.parse("PerStep").kind is PolicyKind.PER_STEP
        spec = PolicySpec.parse("static@first-b")
        assert spec.kind is PolicyKind.STATIC
        assert spec.to_config(ColdStart.ORACLE_STEP0).cold_start is ColdStart.FIRST_B

    @pytest.mark.parametrize("text", ["tide", "perstep:3", "lru", "tide:x", "static@warm"])
    def test_invalid(self, text):
        with pytest.raises(ValidationError) as exc:
            PolicySpec.parse(text)
        assert "--policies" in str(exc.value)

    def test_parse_policies(self):
        specs = parse_policies("perstep, static,,tide:2")
        assert [s.kind for s in specs] == [PolicyKind.PER_STEP, PolicyKind.STATIC, PolicyKind.TIDE]
        with pytest.raises(ValidationError):
            parse_policies(" , ")

    def test_parse_int_list(self):
        assert parse_int_list("--budgets", "2, 4,8") == [2, 4, 8]
        with pytest.raises(ValidationError):
            parse_int_list("--budgets", "2,four")
        with pytest.raises(ValidationError):
            parse_int_list("--budgets", "")


    def test_parse_fraction_list(self):
        assert parse_fraction_list("--decode-fractions", "0.1, 0.5") == [0.1, 0.5]
        for text in ("", "0.1,x", "0.1,1.5", "0"):
            with pytest.raises(ValidationError) as exc:
                parse_fraction_list("--decode-fractions", text)
            assert "--decode-fractions" in str(exc.value)


class TestSweepRunner:
    """Test cases for comparison grids."""

    @pytest.fixture
    def runner(self, profile):
        return SweepRunner(profile, jobs=2)

    def test_grid_over_budgets(self, runner, small_trace):
        policies = parse_policies("perstep,static,tide:auto")
        tables = runner.run_grid([small_trace], [2, 3], policies)
        assert len(tables) == 2
        assert [r.budget for r in tables[0].rows] == [2, 2, 2]
        assert set(runner.resolved_taus) == {"trace0/B=2", "trace0/B=3"}
        for table in tables:
            assert table.rows[0].speedup == 1.0
            tau = runner.resolved_taus[f"trace0/B={table.rows[0].budget}"]
            assert table.rows[2].label == f"tide(tau={tau})"
            assert 1 <= tau < small_trace.shape.block_size

    @pytest.mark.parametrize("policy", ["perstep", "tide:2"])
    def test_throughput_rises_with_budget(self, runner, calibrated_trace, policy):
        """Test more GPU-resident experts never slow the refreshing policies down."""
        tables = runner.run_grid([calibrated_trace], [16, 64, 128], parse_policies(policy))
        throughputs = [table.rows[0].throughput for table in tables]
        assert throughputs[0] < throughputs[-1]
        assert throughputs[0] <= throughputs[1] <= throughputs[2]

    def test_grid_over_decode_fractions(self, runner, small_trace):
        """Test one cell per decode fraction, decoded tokens leaving routing."""
        tables = runner.run_grid(
            [small_trace], [3], parse_policies("static,perstep"), decode_fractions=[0.1, 0.5]
        )
        assert len(tables) == 2
        assert [r.decode_fraction for r in tables[0].rows] == [0.1, 0.1]
        assert [r.decode_fraction for r in tables[1].rows] == [0.5, 0.5]
        slow, fast = (table.reports[0].aggregate for table in tables)
        assert fast.gpu_pairs + fast.cpu_pairs < slow.gpu_pairs + slow.cpu_pairs
        assert fast.tokens_decoded == slow.tokens_decoded == small_trace.shape.num_tokens
        assert tables[1].rows[0].throughput >= tables[0].rows[0].throughput
        assert tables[1].row("static", decode_fraction=0.5) is tables[1].rows[0]

    def test_auto_tau_per_decode_fraction(self, runner, small_trace):
        runner.run_grid([small_trace], [3], parse_policies("tide:auto"), decode_fractions=[0.2, 0.6])
        assert set(runner.resolved_taus) == {"trace0/B=3/f=0.2", "trace0/B=3/f=0.6"}

    def test_auto_tau_is_the_best_interval(self, runner, small_trace):
        """Test tide:auto scores at least as well as every fixed interval."""
        fixed = ",".join(f"tide:{tau}" for tau in range(1, small_trace.shape.block_size))
        tables = runner.run_grid([small_trace], None, parse_policies(f"tide:auto,{fixed}"))
        rows = tables[0].rows
        assert all(rows[0].total_time <= r.total_time for r in rows[1:])

    def test_header_budget_by_default(self, runner, small_trace):
        tables = runner.run_grid([small_trace], None, parse_policies("static"))
        assert tables[0].rows[0].budget == small_trace.shape.gpu_budget

    def test_budget_too_large(self, runner, small_trace):
        with pytest.raises(BudgetExceedsExperts):
            runner.run_grid([small_trace], [99], parse_policies("static"))

    def test_run_log_and_merge(self, runner, small_trace):
        tables = runner.run_grid([small_trace], [1, 2], parse_policies("perstep,tide:2"))
        log = runner.run_log(tables)
        assert log["cells"] == 2
        assert len(log["rows"]) == 4
        assert log["resolved_taus"] == {}
        merged = merge_tables(tables)
        assert merged.baseline == "perstep"
        assert [r.budget for r in merged.rows] == [1, 1, 2, 2]
