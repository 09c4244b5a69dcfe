import numpy as np
import pytest

from surfglm.classical_glm import activation_ttest, fit_classical, mesh_estimate_from_stats
from surfglm.em_engine import SufficientStats
from surfglm.preprocess import SessionData


def test_shared_design_matches_lstsq(small_session):
    session, _ = small_session
    fit = fit_classical(session)
    expected, *_ = np.linalg.lstsq(session.X, session.Y, rcond=None)
    np.testing.assert_allclose(fit.beta_hat, expected.T, rtol=1e-10)
    assert fit.dof == session.T - session.K
    assert not fit.rank_deficient.any()


def test_per_location_design(rng):
    T, N, K = 30, 4, 2
    X = rng.standard_normal((T, N, K))
    Y = rng.standard_normal((T, N))
    fit = fit_classical(SessionData(Y=Y, X=X, whitened=True))
    for v in range(N):
        b, *_ = np.linalg.lstsq(X[:, v], Y[:, v], rcond=None)
        np.testing.assert_allclose(fit.beta_hat[v], b, rtol=1e-10)
        resid = Y[:, v] - X[:, v] @ b
        s2 = resid @ resid / (T - K)
        se = np.sqrt(s2 * np.diag(np.linalg.inv(X[:, v].T @ X[:, v])))
        np.testing.assert_allclose(fit.se[v], se, rtol=1e-10)


def test_rank_deficient_locations_are_flagged(rng, caplog):
    T, N = 20, 3
    X = rng.standard_normal((T, N, 2))
    X[:, 1, 1] = 2.0 * X[:, 1, 0]
    fit = fit_classical(SessionData(Y=rng.standard_normal((T, N)), X=X, whitened=True))
    np.testing.assert_array_equal(fit.rank_deficient, [False, True, False])
    assert np.isnan(fit.se[1]).all()
    assert not activation_ttest(fit)[1].any()
    assert "rank-deficient" in caplog.text


def test_strong_signal_is_detected(rng):
    T, N = 100, 6
    X = rng.standard_normal((T, 1))
    beta = np.array([[3.0, 3.0, 3.0, 0.0, 0.0, 0.0]])
    Y = X @ beta + rng.standard_normal((T, N))
    fit = fit_classical(SessionData(Y=Y, X=X, whitened=True))
    active = activation_ttest(fit, gamma=0.0, alpha=0.05, correction="bonferroni")
    np.testing.assert_array_equal(active[:3, 0], True)
    # a threshold above the truth is not exceeded
    assert not activation_ttest(fit, gamma=5.0).any()
    with pytest.raises(ValueError, match="unknown correction"):
        activation_ttest(fit, correction="fdr")


def test_mesh_estimate_equals_vertexwise_fit(small_session):
    session, _ = small_session
    stats = SufficientStats.from_session(session)
    np.testing.assert_allclose(
        mesh_estimate_from_stats(stats), fit_classical(session).beta_hat.T, rtol=1e-6, atol=1e-8
    )
