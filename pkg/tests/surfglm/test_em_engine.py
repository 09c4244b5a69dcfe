import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from surfglm.classical_glm import fit_classical
from surfglm.config import C1, KAPPA2_INIT, PHI_FLOOR, SIGMA2_FLOOR
from surfglm.em_engine import (
    DegenerateFieldError,
    EmConfig,
    EmWorkspace,
    PosteriorField,
    SufficientStats,
    WhiteningError,
    e_step,
    fit_hemispheres,
    init_task,
    initial_values,
    log_marginal,
    mstep_kappa,
    mstep_phi,
    mstep_sigma2,
    run_em,
)
from surfglm.mesh import assemble_fem, build_projector, flat_grid
from surfglm.preprocess import SessionData
from surfglm.simulator import SimConfig, score, simulate
from surfglm.spde_prior import Hyperparameters, PrecisionOperator, build_qtilde, sample_prior_field

THETA = Hyperparameters(kappa2=[0.5, 2.0], phi=[0.3, 0.8], sigma2=1.3)


def _dense_design(X: np.ndarray, Psi: np.ndarray) -> np.ndarray:
    """A with y = A w, y stacked by location then time, w stacked by task then vertex."""
    T, K = X.shape
    N, n = Psi.shape
    return np.einsum("tk,vj->vtkj", X, Psi).reshape(N * T, K * n)


@pytest.fixture
def problem(small_grid, small_fem, small_session):
    session, _ = small_session
    A = _dense_design(session.X, np.eye(small_grid.n))
    y = session.Y.T.ravel()
    Q = PrecisionOperator.from_theta(THETA, small_fem).Q.toarray()
    P = Q + A.T @ A / THETA.sigma2
    Sigma = np.linalg.inv(P)
    mu = Sigma @ A.T @ y / THETA.sigma2
    stats = SufficientStats.from_session(session)
    return {"A": A, "y": y, "Q": Q, "Sigma": Sigma, "mu": mu, "stats": stats}


def test_sufficient_stats_match_dense_design(problem):
    stats, A, y = problem["stats"], problem["A"], problem["y"]
    np.testing.assert_allclose(stats.XtX.toarray(), A.T @ A, atol=1e-10)
    np.testing.assert_allclose(stats.Xty, A.T @ y, atol=1e-10)
    assert stats.yty == pytest.approx(y @ y)
    assert stats.TN == len(y)


def test_sufficient_stats_through_a_projector(small_grid, rng):
    locations = small_grid.vertices[:-1] + np.array([0.3, 0.2])
    proj = build_projector(small_grid, locations, tol=0.5)
    T, K = 25, 2
    X = rng.standard_normal((T, K))
    Y = rng.standard_normal((T, proj.N))
    stats = SufficientStats.from_session(SessionData(Y=Y, X=X, whitened=True), proj)
    A = _dense_design(X, proj.Psi.toarray())
    np.testing.assert_allclose(stats.XtX.toarray(), A.T @ A, atol=1e-10)
    np.testing.assert_allclose(stats.Xty, A.T @ Y.T.ravel(), atol=1e-10)
    assert stats.n == small_grid.n


def test_pooling_equals_concatenated_runs(small_grid, make_session, rng):
    a, _ = make_session(small_grid, 2, 20, rng)
    b, _ = make_session(small_grid, 2, 30, rng)
    both = SessionData(Y=np.vstack([a.Y, b.Y]), X=np.vstack([a.X, b.X]), whitened=True)
    pooled = SufficientStats.from_sessions([a, b])
    direct = SufficientStats.from_session(both)
    np.testing.assert_allclose(pooled.XtX.toarray(), direct.XtX.toarray(), atol=1e-10)
    np.testing.assert_allclose(pooled.Xty, direct.Xty, atol=1e-10)
    assert pooled.TN == direct.TN
    half = SufficientStats.pool([direct, direct], weights=[0.5, 0.5])
    np.testing.assert_allclose(half.Xty, direct.Xty)
    with pytest.raises(ValueError, match="nothing to pool"):
        SufficientStats.pool([])


def test_e_step_matches_dense_posterior(problem, small_fem):
    post = e_step(problem["stats"], THETA, small_fem)
    np.testing.assert_allclose(post.mu, problem["mu"], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(post.marginal_variance(), np.diag(problem["Sigma"]), rtol=1e-8)
    assert post.mean_fields.shape == (2, small_fem.n)
    np.testing.assert_array_equal(post.task_mean(1), post.mean_fields[1])


def test_posterior_samples_have_the_posterior_mean(problem, small_fem, rng):
    post = e_step(problem["stats"], THETA, small_fem)
    draws = post.sample(rng, 4000)
    assert draws.shape == (4000, 2 * small_fem.n)
    sd = np.sqrt(np.diag(problem["Sigma"]))
    z = (draws.mean(axis=0) - problem["mu"]) / (sd / np.sqrt(4000))
    assert np.abs(z).max() < 5.0


def test_sigma2_update_matches_expected_residual(problem, small_fem):
    post = e_step(problem["stats"], THETA, small_fem)
    A, y, mu, Sigma = problem["A"], problem["y"], problem["mu"], problem["Sigma"]
    expected = (np.sum((y - A @ mu) ** 2) + np.trace(A.T @ A @ Sigma)) / len(y)
    assert mstep_sigma2(problem["stats"], post) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("k", [0, 1])
def test_phi_update_matches_dense_trace(problem, small_fem, k):
    post = e_step(problem["stats"], THETA, small_fem)
    n = small_fem.n
    block = slice(k * n, (k + 1) * n)
    qt = build_qtilde(THETA.kappa2[k], small_fem).toarray()
    m = problem["mu"][block]
    second = problem["Sigma"][block, block] + np.outer(m, m)
    expected = C1 * np.trace(qt @ second) / n
    assert mstep_phi(post, small_fem, THETA.kappa2[k], k) == pytest.approx(expected, rel=1e-9)


def test_kappa_update_maximizes_the_objective(problem, small_fem):
    post = e_step(problem["stats"], THETA, small_fem)
    n = small_fem.n
    second = problem["Sigma"][:n, :n] + np.outer(problem["mu"][:n], problem["mu"][:n])

    def objective(kappa2):
        qt = build_qtilde(kappa2, small_fem).toarray()
        return 0.5 * np.linalg.slogdet(qt)[1] - C1 / (2 * THETA.phi[0]) * np.trace(qt @ second)

    best = mstep_kappa(post, small_fem, THETA.phi[0], 0, kappa2_start=THETA.kappa2[0])
    grid = np.exp(np.linspace(np.log(1e-3), np.log(1e3), 200))
    top = max(objective(k) for k in grid)
    assert objective(best) >= top - 1e-8 * (1.0 + abs(top))


def test_log_marginal_matches_gaussian_density(problem, small_fem):
    A, Q = problem["A"], problem["Q"]
    cov = THETA.sigma2 * np.eye(A.shape[0]) + A @ np.linalg.inv(Q) @ A.T
    expected = multivariate_normal(mean=np.zeros(A.shape[0]), cov=cov).logpdf(problem["y"])
    post = e_step(problem["stats"], THETA, small_fem)
    assert log_marginal(problem["stats"], THETA, small_fem, post) == pytest.approx(expected, rel=1e-8)


def test_hutchinson_traces_agree_with_selected_inverse(problem, small_fem):
    exact = mstep_sigma2(problem["stats"], e_step(problem["stats"], THETA, small_fem))
    config = EmConfig(trace_method="hutchinson", probes=500)
    approx = mstep_sigma2(problem["stats"], e_step(problem["stats"], THETA, small_fem, config=config))
    assert approx == pytest.approx(exact, rel=0.02)


def test_task_count_mismatch(problem, small_fem):
    with pytest.raises(ValueError, match="theta has 1 tasks"):
        e_step(problem["stats"], Hyperparameters(kappa2=[1.0], phi=[1.0], sigma2=1.0), small_fem)


def test_workspace_rejects_other_mesh(problem):
    with pytest.raises(ValueError, match="vertices"):
        EmWorkspace(problem["stats"], assemble_fem(flat_grid(3, 3)))


@pytest.fixture
def exact_fit(small_grid, make_session, rng):
    """Noise-free data and a posterior centred on the generating coefficients."""
    session, beta = make_session(small_grid, 2, 40, rng, sigma=0.0)
    stats = SufficientStats.from_session(session)
    post = PosteriorField(
        mu=beta.ravel(), precision=stats.XtX, n=stats.n, K=stats.K, cov_trace=lambda A: 0.0
    )
    return stats, post


def test_exact_fit_sigma2_is_an_error_when_strict(exact_fit):
    with pytest.raises(DegenerateFieldError, match="reproduces the data exactly"):
        mstep_sigma2(*exact_fit)


def test_exact_fit_sigma2_is_floored_otherwise(exact_fit, caplog):
    with caplog.at_level(logging.WARNING):
        sigma2 = mstep_sigma2(*exact_fit, strict=False)
    assert sigma2 == SIGMA2_FLOOR
    assert "floored" in caplog.text


def test_init_task_on_zero_field_floors_phi(small_fem, caplog):
    with caplog.at_level(logging.WARNING):
        kappa2, phi, iters, converged = init_task(np.zeros(small_fem.n), small_fem)
    assert kappa2 == KAPPA2_INIT
    assert phi == PHI_FLOOR
    assert not converged
    assert "zero field" in caplog.text


def test_initial_values_from_classical_estimate(small_session, small_fem):
    session, beta = small_session
    stats = SufficientStats.from_session(session)
    theta = initial_values(stats, fit_classical(session).beta_hat.T, small_fem, parallel=False)
    assert theta.K == 2
    assert (theta.kappa2 > 0).all() and (theta.phi > 0).all()
    # residual variance of the generating noise (sd 1)
    assert theta.sigma2 == pytest.approx(1.0, rel=0.25)


def test_em_without_acceleration_ascends(small_session, small_grid):
    session, _ = small_session
    config = EmConfig(accelerate=False, max_iter=8, tol=1e-12, tasks_parallel=False)
    result = run_em(session, small_grid, config)
    path = result.trace.ascent_path()
    assert len(path) == 8
    assert (np.diff(path) >= -1e-6 * np.abs(path[:-1])).all()
    assert set(result.trace.to_frame()["step"]) == {"em"}
    assert not result.converged


def test_em_records_trace(small_session, small_grid):
    session, beta = small_session
    result = run_em(session, small_grid, EmConfig(tol=1e-3, max_iter=40))
    assert 1 <= result.trace.iterations <= 40
    if result.converged:
        assert result.trace.changes[-1] <= 1e-3
    frame = result.trace.to_frame()
    assert {"iteration", "step", "kappa2_0", "phi_1", "sigma2", "change", "log_posterior"} <= set(frame)
    assert result.posterior.mean_fields.shape == beta.shape
    assert result.seconds > 0


def test_failed_extrapolation_falls_back_to_em(small_session, small_grid, mocker):
    session, _ = small_session
    mocker.patch.object(Hyperparameters, "from_log_vector", side_effect=ValueError("boom"))
    result = run_em(session, small_grid, EmConfig(tol=1e-3, max_iter=30, tasks_parallel=False))
    assert set(result.trace.to_frame()["step"]) == {"em"}
    path = result.trace.ascent_path()
    assert (np.diff(path) >= -1e-6 * np.abs(path[:-1])).all()


def test_unwhitened_sessions_are_refused(small_grid, rng):
    session = SessionData(Y=rng.standard_normal((30, small_grid.n)), X=rng.standard_normal((30, 1)))
    with pytest.raises(WhiteningError, match=r"sessions \[0\]"):
        run_em(session, small_grid)


def test_given_start_is_used(small_session, small_grid):
    session, _ = small_session
    start = Hyperparameters(kappa2=[1.0, 1.0], phi=[0.5, 0.5], sigma2=1.0)
    result = run_em(session, small_grid, EmConfig(max_iter=1), init=start)
    row = result.trace.rows[0]
    assert row["kappa2_0"] == 1.0
    assert row["phi_1"] == 0.5


def test_hemispheres_are_fitted_independently(small_grid, make_session, rng):
    left, _ = make_session(small_grid, 1, 30, rng)
    right_mesh = flat_grid(5, 5, width=8.0)
    right, _ = make_session(right_mesh, 1, 30, rng)
    results = fit_hemispheres([([left], small_grid), ([right], right_mesh)], EmConfig(max_iter=5))
    assert [r.posterior.n for r in results] == [small_grid.n, right_mesh.n]


def test_config_round_trip():
    config = EmConfig(tol=1e-4, accelerate=False, kappa2_bounds=(1e-3, 1e3))
    assert EmConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ValueError, match="tolerance"):
        EmConfig(tol=0.0)
    with pytest.raises(ValueError, match="max_iter"):
        replace(config, max_iter=0)


@pytest.mark.slow
def test_recovers_prior_hyperparameters():
    config = SimConfig(mode="prior", n_vertices=900, K=1, T=200, prior_kappa2=0.05, prior_phi=0.5, seed=3)
    sessions, truth, mesh = simulate(config)
    result = run_em(sessions, mesh, EmConfig(tol=1e-4))
    assert result.converged
    assert result.theta.sigma2 == pytest.approx(1.0, rel=0.05)
    assert result.theta.kappa2[0] == pytest.approx(0.05, rel=0.5)
    assert result.theta.phi[0] == pytest.approx(0.5, rel=0.5)


@pytest.mark.slow
def test_em_beats_classical_on_smooth_fields():
    config = SimConfig(n_vertices=1600, K=2, T=200, error_var=4.0, seed=7)
    sessions, truth, mesh = simulate(config)
    classical = np.mean([fit_classical(s).beta_hat.T for s in sessions], axis=0)
    em = run_em(sessions, mesh, EmConfig()).posterior.mean_fields
    assert score(em, truth).rmse < score(classical, truth).rmse


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_init_task_recovers_prior_field_hyperparameters(seed):
    fem = assemble_fem(flat_grid(45, 45, width=100.0))
    theta = Hyperparameters(kappa2=[0.5], phi=[0.5], sigma2=1.0)
    w = sample_prior_field(theta, fem, np.random.default_rng(seed))[0, 0]
    kappa2, phi, iters, converged = init_task(w, fem)
    assert converged
    assert iters <= 30
    assert kappa2 == pytest.approx(0.5, rel=0.25)
    assert phi == pytest.approx(0.5, rel=0.25)
