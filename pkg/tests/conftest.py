# tests/conftest.py
import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from tcatseg.data import ArchSpec, LabeledCloud, generate_arch, resample  # noqa: E402
from tcatseg.network import ModelConfig  # noqa: E402

SLOW_ENV = "TCATSEG_SLOW"


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.environ.get(SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"slow; set {SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(
        n_input=256,
        n_levels=2,
        widths=(8, 16),
        radii=(0.2, 0.4),
        k_neighbors=8,
        stem_width=8,
        decoder_width=8,
    ).validate()


@pytest.fixture
def arch() -> LabeledCloud:
    return generate_arch(ArchSpec(n_teeth=6, points_per_tooth=60, gingiva_points=200, seed=1))


@pytest.fixture
def arch_256(arch: LabeledCloud) -> LabeledCloud:
    return resample(arch, 256, seed=0)
