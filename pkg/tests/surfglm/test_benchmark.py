import numpy as np
import pytest

from surfglm.benchmark import Condition, benchmark, parse_conditions, summarize, tolerance_sweep
from surfglm.em_engine import EmConfig
from surfglm.simulator import SimConfig

BASE = SimConfig(n_vertices=400, K=1, T=60)
QUICK = EmConfig(max_iter=3)
DESK = SimConfig(n_vertices=2000, K=2, T=300)


def test_conditions_form_a_grid():
    conds = parse_conditions([400, 900], [1, 2])
    assert [c.label for c in conds] == ["n=400,K=1", "n=400,K=2", "n=900,K=1", "n=900,K=2"]


def test_one_row_per_condition_replicate_and_fitter():
    frame = benchmark([Condition(400, 1)], 2, BASE, QUICK, seed=3)
    assert len(frame) == 4
    assert list(frame["fitter"]) == ["classical", "em", "classical", "em"]
    assert list(frame["replicate"]) == [0, 0, 1, 1]
    assert set(frame["condition"]) == {"n=400,K=1"}
    assert frame["error"].isna().all()
    assert (frame["seconds"] > 0).all()
    assert np.isfinite(frame["rmse"]).all()

    em = frame[frame["fitter"] == "em"]
    assert (em["iterations"] <= 3).all()
    assert (em["sigma2"] > 0).all()
    # both fitters see the same dataset
    assert frame["seed"].iloc[0] == frame["seed"].iloc[1]
    assert frame["seed"].iloc[0] != frame["seed"].iloc[2]


def test_same_seed_same_rmse():
    a = benchmark([Condition(400, 1)], 1, BASE, QUICK, seed=5, fitters=("classical",))
    b = benchmark([Condition(400, 1)], 1, BASE, QUICK, seed=5, fitters=("classical",))
    assert a["rmse"].iloc[0] == b["rmse"].iloc[0]


def test_a_failing_fitter_is_recorded(mocker):
    mocker.patch("surfglm.benchmark.run_em", side_effect=RuntimeError("boom"))
    frame = benchmark([Condition(400, 1)], 2, BASE, QUICK)
    em = frame[frame["fitter"] == "em"]
    assert (em["error"] == "boom").all()
    assert em["rmse"].isna().all()
    classical = frame[frame["fitter"] == "classical"]
    assert classical["error"].isna().all()

    table = summarize(frame)
    assert list(table["fitter"]) == ["classical", "em"]
    assert list(table["failures"]) == [0, 2]
    assert {"seconds_mean", "seconds_std", "rmse_mean", "rmse_std"} <= set(table.columns)


def test_a_failing_simulation_is_recorded():
    tiny = SimConfig(n_vertices=400, extent=20.0, K=1, T=60)
    frame = benchmark([Condition(400, 1)], 1, tiny, QUICK)
    assert len(frame) == 2
    assert frame["error"].str.contains("mesh too small").all()


def test_raw_runs_are_preprocessed_before_fitting():
    raw = SimConfig(n_vertices=400, K=1, T=60, ar=(0.3,), baseline=100.0)
    frame = benchmark([Condition(400, 1)], 1, raw, QUICK, fitters=("classical",))
    assert frame["error"].isna().all()


def test_tolerance_sweep_reuses_each_dataset():
    sweep = tolerance_sweep([1e-1, 1e-3], 1, BASE, EmConfig(max_iter=5))
    assert list(sweep["tol"]) == [1e-1, 1e-3]
    assert list(sweep["dataset"]) == [0, 0]
    assert sweep["iterations"].iloc[0] <= sweep["iterations"].iloc[1]


def test_replicates_must_be_positive():
    with pytest.raises(ValueError, match="replicates must be positive"):
        benchmark([Condition(400, 1)], 0, BASE, QUICK)


@pytest.mark.slow
def test_tighter_tolerance_costs_time_and_does_not_cost_accuracy():
    sweep = tolerance_sweep([1.0, 0.1, 0.01, 0.001], 3, DESK, EmConfig(), seed=11)
    assert sweep["error"].isna().all()
    for _, runs in sweep.groupby("dataset"):
        assert (np.diff(runs["iterations"].to_numpy()) >= 0).all()
    means = sweep.groupby("tol", sort=False)[["rmse", "seconds"]].mean()
    rmse, seconds = means["rmse"].to_numpy(), means["seconds"].to_numpy()
    assert (np.diff(rmse) <= 0.01 * rmse[:-1]).all()
    assert seconds[-1] >= seconds[0]


@pytest.mark.slow
def test_em_recovers_noise_variance():
    frame = benchmark([Condition(2000, 2)], 5, DESK, EmConfig(), fitters=("em",))
    assert frame["error"].isna().all()
    assert frame["sigma2"].mean() == pytest.approx(1.0, rel=0.1)
