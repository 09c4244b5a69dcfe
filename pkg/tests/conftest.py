"""Pytest configuration and fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest
from plumbum import local

from surfglm.mesh import TriangularMesh, assemble_fem, flat_grid
from surfglm.preprocess import SessionData


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run desk-scale acceptance tests (minutes to hours)",
    )


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--run-slow"):
        skip_slow = pytest.mark.skip(reason="use --run-slow to run")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def project_root(pytestconfig) -> Path:
    """Return project root directory."""
    return Path(pytestconfig.rootpath)


@pytest.fixture
def surfglm(tmp_path: Path):
    """Plumbum command for the CLI, with the data dir isolated per test."""
    env = {
        "SURFGLM_DATA": str(tmp_path / "data"),
        "SURFGLM_THREADS": "2",
    }
    return local[sys.executable]["-m", "surfglm"].with_env(**env)


# ============================================================================
# SMALL MESHES AND DATA
# ============================================================================


@pytest.fixture(scope="session")
def small_grid() -> TriangularMesh:
    """6 x 6 planar grid, 36 vertices."""
    return flat_grid(6, 6, width=10.0)


@pytest.fixture(scope="session")
def small_fem(small_grid):
    return assemble_fem(small_grid)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def _make_session(mesh: TriangularMesh, K: int, T: int, rng, sigma: float = 1.0) -> tuple:
    """White-noise session at the vertices with smooth-ish coefficients, and the truth (K, n)."""
    x = mesh.vertices[:, 0]
    beta = np.stack([np.sin(x / 3.0 + k) for k in range(K)])
    X = rng.standard_normal((T, K))
    Y = X @ beta + sigma * rng.standard_normal((T, mesh.n))
    return SessionData(Y=Y, X=X, whitened=True), beta


@pytest.fixture
def small_session(small_grid, rng):
    return _make_session(small_grid, K=2, T=40, rng=rng)


@pytest.fixture
def make_session():
    """Factory: make_session(mesh, K, T, rng, sigma) -> (SessionData, beta)."""
    return _make_session
