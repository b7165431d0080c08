import numpy as np
import pytest

from tactisim.config import PipelineConfig
from tactisim.fields import ParticleLayerSpec
from tactisim.geometry import PinholeCamera, default_gel_to_pinhole
from tactisim.visibility import VisibilityGrid

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def cam():
    return PinholeCamera(-440.0, (220.0, 220.0), (440, 440))


@pytest.fixture
def gel_to_pinhole():
    return default_gel_to_pinhole(-30.0)


@pytest.fixture
def layer():
    return ParticleLayerSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def uniform_vis(layer):
    return VisibilityGrid.uniform(layer, 1.0)


@pytest.fixture
def small_cfg():
    """A coarse configuration for quick pipeline tests."""
    return PipelineConfig.from_dict(
        {
            "fields": {"grid_spacing_mm": 1.5, "fem_node_spacing_mm": 2.0},
            "visibility": {"n_configs": 3, "bin_dims": [5, 5, 3]},
            "flow": {"m": 10, "n": 5},
            "material": {"force_node_spacing_mm": 1.0},
        }
    )
