#!/usr/bin/env python3
"""
Test Profile Fitting Accuracy
Recovering known constants from synthetic measurements, with and without noise.
"""

import pytest

from utils.cost_model import fit_profile, synthesize_measurements
from utils.moe_types import HardwareProfile

KNOWN = HardwareProfile(c_io=35.0, c_cpu=12.5, c_gpu=0.75)


def relative_errors(fitted: HardwareProfile):
    return [
        abs(getattr(fitted, name) - getattr(KNOWN, name)) / getattr(KNOWN, name)
        for name in ("c_io", "c_cpu", "c_gpu")
    ]


class TestProfileFitting:
    """Test cases for least-squares profile recovery."""

    @pytest.mark.parametrize("overhead", [0.0, 4.0])
    def test_noiseless(self, overhead):
        fit = fit_profile(synthesize_measurements(KNOWN, overhead=overhead))
        assert max(relative_errors(fit.profile)) <= 1e-9
        assert all(r <= 1e-6 for r in fit.residuals.values())

    def test_five_percent_noise(self):
        """Test every seed recovers each constant within 10%."""
        for seed in range(100):
            samples = synthesize_measurements(KNOWN, noise=0.05, seed=seed)
            assert max(relative_errors(fit_profile(samples).profile)) <= 0.10
