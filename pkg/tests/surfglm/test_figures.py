import numpy as np
import pandas as pd
import pytest

from surfglm.figures import activation_map, heatmap, rmse_boxes, time_bars, tolerance_plot
from surfglm.mesh import icosphere

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def test_heatmap_is_deterministic(tmp_path, small_grid):
    values = np.sin(small_grid.vertices[:, 0])
    a = heatmap(small_grid, values, tmp_path / "a.png", title="task0")
    b = heatmap(small_grid, values, tmp_path / "b.png", title="task0")
    assert a.read_bytes().startswith(PNG_SIGNATURE)
    assert a.read_bytes() == b.read_bytes()


def test_heatmap_of_zero_field_and_bad_shape(tmp_path, small_grid):
    assert heatmap(small_grid, np.zeros(small_grid.n), tmp_path / "zero.png").exists()
    with pytest.raises(ValueError, match="one value per vertex"):
        heatmap(small_grid, np.zeros(3), tmp_path / "bad.png")


def test_heatmap_on_a_sphere(tmp_path):
    mesh = icosphere(2, radius=10.0)
    assert heatmap(mesh, mesh.vertices[:, 2], tmp_path / "s.png").stat().st_size > 0


def test_empty_activation_map_still_renders(tmp_path, small_grid):
    empty = np.zeros(small_grid.n, dtype=bool)
    path = activation_map(small_grid, {0.0: empty, 0.5: empty}, tmp_path / "map.png")
    assert path.read_bytes().startswith(PNG_SIGNATURE)


def test_activation_map_differs_when_sets_differ(tmp_path, small_grid):
    some = np.zeros(small_grid.n, dtype=bool)
    some[:10] = True
    empty = np.zeros(small_grid.n, dtype=bool)
    a = activation_map(small_grid, {0.0: some}, tmp_path / "a.png")
    b = activation_map(small_grid, {0.0: empty}, tmp_path / "b.png")
    assert a.read_bytes() != b.read_bytes()


def test_activation_map_limits(tmp_path, small_grid):
    mask = np.ones(small_grid.n, dtype=bool)
    with pytest.raises(ValueError, match="at most 3 thresholds"):
        activation_map(small_grid, {g: mask for g in (0.0, 0.5, 1.0, 2.0)}, tmp_path / "x.png")
    with pytest.raises(ValueError, match="gamma=0.5"):
        activation_map(small_grid, {0.0: mask, 0.5: mask[:5]}, tmp_path / "x.png")


def test_benchmark_figures(tmp_path):
    frame = pd.DataFrame(
        {
            "condition": ["n=100,K=1"] * 4 + ["n=400,K=1"] * 4,
            "fitter": ["classical", "em"] * 4,
            "seconds": [0.1, 1.0, 0.1, 1.2, 0.3, 3.0, 0.2, 2.5],
            "rmse": [0.5, 0.2, 0.6, 0.25, 0.4, 0.1, np.nan, 0.15],
        }
    )
    assert time_bars(frame, tmp_path / "time.png").exists()
    assert rmse_boxes(frame, tmp_path / "rmse.png").exists()

    sweep = pd.DataFrame({"tol": [1e-1, 1e-2, 1e-3] * 2, "seconds": [1, 2, 3] * 2, "rmse": [0.3, 0.2, 0.2] * 2})
    assert tolerance_plot(sweep, tmp_path / "tol.png", tolerances=[1e-1, 1e-3]).exists()
