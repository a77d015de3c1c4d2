"""
Pytest configuration: shared shapes, traces and profiles
"""

import pytest

from utils.config import config_manager
from utils.moe_types import HardwareProfile, ModelShape
from utils.routing_trace import GenSpec, generate

# Shape used by the end-to-end checks: 256 experts, top-8, a 32-token block
# decoded over 32 steps with 64 GPU-resident experts per layer.
CALIBRATED_SHAPE = ModelShape(
    num_layers=1, num_experts=256, top_k=8, gpu_budget=64, block_size=32, num_tokens=32
)
CALIBRATED_PERSISTENCE = 0.97


def calibrated_spec(seed: int, **overrides) -> GenSpec:
    values = dict(
        shape=CALIBRATED_SHAPE,
        persistence=CALIBRATED_PERSISTENCE,
        popularity_skew=1.0,
        seed=seed,
    )
    values.update(overrides)
    return GenSpec(**values)


def pytest_collection_modifyitems(config, items):
    for item in items:
        if "acceptance" in item.path.parts:
            item.add_marker(pytest.mark.slow)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Tests never inherit MOE_SIM_* settings from the shell."""
    for key in ("MOE_SIM_SEED", "MOE_SIM_JOBS", "MOE_SIM_LOG_LEVEL", "MOE_SIM_OUTPUT_DIR"):
        monkeypatch.delenv(key, raising=False)
    monkeypatch.setenv("MOE_SIM_DEBUG_CHECKS", "1")
    config_manager.reload()
    yield
    config_manager.reload()


@pytest.fixture
def small_shape():
    return ModelShape(
        num_layers=2, num_experts=8, top_k=2, gpu_budget=3, block_size=6, num_tokens=4
    )


@pytest.fixture
def small_trace(small_shape):
    return generate(GenSpec(shape=small_shape, persistence=0.8, seed=7))


@pytest.fixture
def profile():
    return HardwareProfile(c_io=20.0, c_cpu=20.0, c_gpu=1.0)


@pytest.fixture(scope="session")
def calibrated_trace():
    return generate(calibrated_spec(seed=2024))
