import json

import numpy as np
import pytest

from surfglm.classical_glm import fit_classical
from surfglm.simulator import (
    BUMP_CUTOFF,
    SimConfig,
    SimulationError,
    ar_noise,
    block_design,
    bump_radius,
    build_mesh,
    score,
    simulate,
)

SMALL = SimConfig(n_vertices=900, K=2, T=120, seed=4)


def test_noiseless_runs_are_recovered_exactly():
    sessions, truth, mesh = simulate(SimConfig(n_vertices=900, K=2, T=120, error_var=0.0, seed=2))
    assert len(sessions) == 1
    fit = fit_classical(sessions[0])
    np.testing.assert_allclose(fit.beta_hat.T, truth.beta, atol=1e-8)
    assert score(fit.beta_hat.T, truth).rmse < 1e-8


def test_bumps_have_the_calibrated_mean_amplitude():
    _, truth, mesh = simulate(SMALL)
    assert mesh.n == 900
    for k in range(2):
        active = truth.beta[k][truth.masks[k]]
        assert 0.4 <= active.mean() <= 0.6
        assert active.max() <= SMALL.amplitude
        # truncated at the cutoff fraction of the peak
        assert active.min() >= SMALL.amplitude * BUMP_CUTOFF * (1 - 1e-9)


def test_bump_radius():
    assert bump_radius(5.0) == pytest.approx(5.0 * np.sqrt(-2.0 * np.log(0.02)))


def test_same_seed_same_data():
    a_sessions, a_truth, _ = simulate(SMALL)
    b_sessions, b_truth, _ = simulate(SMALL)
    np.testing.assert_array_equal(a_truth.beta, b_truth.beta)
    np.testing.assert_array_equal(a_sessions[0].Y, b_sessions[0].Y)
    c_sessions, _, _ = simulate(SimConfig(n_vertices=900, K=2, T=120, seed=5))
    assert not np.array_equal(a_sessions[0].Y, c_sessions[0].Y)


def test_nested_runs_are_ordered_and_labelled():
    config = SimConfig(n_vertices=900, K=1, T=60, subjects=2, sessions=2, runs=3, run_var=0.1, seed=1)
    sessions, truth, _ = simulate(config)
    assert len(sessions) == 12
    assert truth.labels[0] == (0, 0, 0)
    assert truth.labels[-1] == (1, 1, 2)
    assert truth.fields.shape == (2, 2, 3, 1, 900)
    np.testing.assert_array_equal(truth.field_of(4), truth.fields[0, 1, 1])
    # run variation lives inside the active support
    deviation = truth.fields[0, 0, 0] - truth.beta
    assert np.abs(deviation[~truth.masks]).max() == 0.0
    assert np.abs(deviation[truth.masks]).max() > 0.0


def test_subject_variance_scales_the_deviation():
    low = SimConfig(n_vertices=900, K=1, T=60, subjects=4, subject_var=0.01, seed=8)
    high = SimConfig(n_vertices=900, K=1, T=60, subjects=4, subject_var=1.0, seed=8)
    _, t_low, _ = simulate(low)
    _, t_high, _ = simulate(high)
    d_low = np.std(t_low.fields[:, 0, 0] - t_low.beta)
    d_high = np.std(t_high.fields[:, 0, 0] - t_high.beta)
    assert d_high / d_low == pytest.approx(10.0, rel=1e-6)


def test_prior_mode_keeps_generating_theta():
    config = SimConfig(mode="prior", n_vertices=400, K=1, T=60, prior_kappa2=0.1, prior_phi=0.3)
    _, truth, _ = simulate(config)
    assert truth.theta is not None
    assert truth.theta.kappa2[0] == pytest.approx(0.1)
    assert truth.masks.all()
    assert truth.to_dict()["theta"]["phi"] == pytest.approx([0.3])


def test_raw_bold_output_needs_preprocessing():
    config = SimConfig(n_vertices=400, K=1, T=60, ar=(0.3,), baseline=1000.0)
    sessions, _, _ = simulate(config)
    assert not config.whitened
    assert not sessions[0].whitened
    assert sessions[0].Y.mean() == pytest.approx(1000.0, rel=0.01)


def test_block_design_alternates_tasks(rng):
    D = block_design(90, 2, 15, rng)
    assert D.shape == (90, 2)
    assert (D.sum(axis=1) <= 1).all()
    assert D[:, 0].any() and D[:, 1].any()
    with pytest.raises(SimulationError, match="need at least 4 for 3 tasks"):
        block_design(30, 3, 15, rng)


def test_ar_noise_lag_one_correlation(rng):
    e = ar_noise((0.6,), 1.0, 4000, 3, rng)
    r = np.mean([np.corrcoef(e[1:, i], e[:-1, i])[0, 1] for i in range(3)])
    assert r == pytest.approx(0.6, abs=0.05)
    white = ar_noise((), 2.0, 4000, 2, rng)
    assert white.var() == pytest.approx(2.0, rel=0.1)


def test_icosphere_mesh_size():
    mesh = build_mesh(SimConfig(mesh="icosphere", n_vertices=640))
    assert mesh.n == 642


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"K": 0}, "counts must be positive: K"),
        ({"ar": (1.2,)}, "not stationary"),
        ({"mode": "noise"}, "unknown mode"),
        ({"amplitude": -1.0}, "amplitude"),
    ],
)
def test_invalid_configs(kwargs, message):
    with pytest.raises(SimulationError, match=message):
        SimConfig(**kwargs)


def test_mesh_too_small_for_bumps():
    with pytest.raises(SimulationError, match="mesh too small"):
        simulate(SimConfig(n_vertices=400, extent=20.0, K=1, T=60))


def test_config_from_json(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"n_vertices": 400, "ar": [0.2, 0.1]}))
    config = SimConfig.from_json(path)
    assert config.ar == (0.2, 0.1)
    assert SimConfig.from_dict(config.to_dict()) == config
    path.write_text(json.dumps({"vertices": 400}))
    with pytest.raises(SimulationError, match="unknown simulation settings: vertices"):
        SimConfig.from_json(path)


def test_score_rates_and_errors():
    truth = np.array([[0.0, 1.0, 2.0, 0.0]])
    assert score(truth, truth).rmse == 0.0
    assert score(truth + 1.0, truth).rmse == pytest.approx(1.0)
    s = score(truth, truth, active=np.array([[False, True, False, True]]))
    assert s.tpr == pytest.approx(0.5)
    assert s.fpr == pytest.approx(0.5)
    with pytest.raises(SimulationError, match="shape"):
        score(truth[:, :3], truth)
