"""
Shared fixtures for the pollinate test suite.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure we can import from the package
project_root = Path(__file__).parent.parent
src_path = project_root / "src"
sys.path.insert(0, str(src_path))

from pollinate.config import PipelineConfig  # noqa: E402
from pollinate.models import MaterialParams  # noqa: E402
from pollinate.synthetic import straight_rod, straight_stem, y_plant  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="rewrite tests/golden files from the current output",
    )


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep user POLLINATE_* settings out of the tests."""
    for name in (
        "POLLINATE_CONFIG",
        "POLLINATE_LOG_LEVEL",
        "POLLINATE_LOG_DIR",
        "POLLINATE_WORKERS",
        "POLLINATE_LANG",
    ):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("POLLINATE_LOG_DIR", "/nonexistent-pollinate-logs")


@pytest.fixture
def config():
    return PipelineConfig()


@pytest.fixture
def stem_skeleton():
    return straight_stem()


@pytest.fixture
def y_skeleton():
    return y_plant()


@pytest.fixture
def short_rod():
    """Horizontal 10-node cantilever, stiff enough for quick solves."""
    return straight_rod(0.2, 0.004, 10, MaterialParams(), direction=(1.0, 0.0, 0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
