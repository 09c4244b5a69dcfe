import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import norm

from surfglm.em_engine import EmConfig, PosteriorField, SufficientStats, e_step, run_em
from surfglm.excursions import excursion_from_draws, excursion_set, excursion_sets, projected_moments
from surfglm.linalg import factorize
from surfglm.mesh import Projector, build_projector
from surfglm.spde_prior import Hyperparameters

# three sure locations, four with marginal probability 0.97, two clearly inactive
TOY_MEAN = np.array([5.0, 5.0, 5.0, 1.88, 1.88, 1.88, 1.88, 0.0, -3.0])


def _independent_posterior(mu: np.ndarray) -> PosteriorField:
    precision = sp.identity(len(mu), format="csc")
    return PosteriorField(mu=mu, precision=precision, n=len(mu), K=1, factor=factorize(precision))


def test_independent_locations_give_the_expected_prefix():
    post = _independent_posterior(TOY_MEAN)
    res = excursion_set(post, Projector.eye(9), gamma=0.0, alpha=0.1, samples=20000, seed=1)
    np.testing.assert_array_equal(np.flatnonzero(res.active[:, 0]), [0, 1, 2, 3, 4, 5])
    assert res.joint_prob[0] == pytest.approx(norm.cdf(1.88) ** 3, abs=0.015)
    assert res.joint_prob[0] >= 0.9
    np.testing.assert_allclose(res.marginal_prob[:, 0], norm.sf(-TOY_MEAN), atol=1e-12)
    assert res.counts.tolist() == [6]


def test_threshold_above_everything_gives_empty_set():
    post = _independent_posterior(TOY_MEAN)
    res = excursion_set(post, Projector.eye(9), gamma=50.0, samples=1000)
    assert not res.active.any()
    assert res.joint_prob[0] == 1.0


def test_same_seed_same_set():
    post = _independent_posterior(TOY_MEAN)
    a = excursion_set(post, Projector.eye(9), gamma=0.0, alpha=0.1, samples=2000, seed=5)
    b = excursion_set(post, Projector.eye(9), gamma=0.0, alpha=0.1, samples=2000, seed=5)
    np.testing.assert_array_equal(a.active, b.active)
    np.testing.assert_array_equal(a.joint_prob, b.joint_prob)


@pytest.mark.parametrize("alpha, samples", [(0.0, 1000), (1.0, 1000), (0.05, 10)])
def test_bad_level_or_sample_count(alpha, samples):
    post = _independent_posterior(TOY_MEAN)
    with pytest.raises(ValueError):
        excursion_set(post, Projector.eye(9), gamma=0.0, alpha=alpha, samples=samples)


def test_sets_are_nested_across_thresholds(small_session, small_grid):
    session, _ = small_session
    result = run_em(session, small_grid, EmConfig(max_iter=20))
    sets = excursion_sets(result.posterior, Projector.eye(small_grid.n), [1.0, 0.0, 0.5], samples=2000)
    assert list(sets) == [0.0, 0.5, 1.0]
    for lower, higher in [(0.0, 0.5), (0.5, 1.0)]:
        assert not (sets[higher].active & ~sets[lower].active).any()
    # every member is individually credible
    for res in sets.values():
        assert (res.marginal_prob[res.active] >= 1.0 - res.alpha).all()


def test_projected_moments_match_dense_covariance(small_session, small_grid, small_fem, rng):
    session, _ = small_session
    theta = Hyperparameters(kappa2=[0.5, 2.0], phi=[0.3, 0.8], sigma2=1.3)
    post = e_step(SufficientStats.from_session(session), theta, small_fem)
    inner = small_grid.vertices[small_grid.vertices.max(axis=1) < 9.0]
    locations = inner + rng.uniform(0.1, 0.9, size=inner.shape)
    proj = build_projector(small_grid, locations)
    mean, sd = projected_moments(post, proj)
    Sigma = np.linalg.inv(post.precision.toarray())
    Psi = proj.Psi.toarray()
    n = small_grid.n
    for k in range(2):
        block = Sigma[k * n : (k + 1) * n, k * n : (k + 1) * n]
        np.testing.assert_allclose(mean[:, k], Psi @ post.task_mean(k), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sd[:, k], np.sqrt(np.diag(Psi @ block @ Psi.T)), rtol=1e-8)


def test_sets_from_draws():
    S = 100
    draws = np.ones((S, 3, 1))
    draws[:5, 1, 0] = -1.0
    draws[5:13, 2, 0] = -1.0
    res = excursion_from_draws(draws, gamma=0.0, alpha=0.1)
    np.testing.assert_array_equal(res.active[:, 0], [True, True, False])
    assert res.joint_prob[0] == pytest.approx(0.95)
    restricted = excursion_from_draws(
        draws, gamma=0.0, alpha=0.1, allowed=np.array([[True], [False], [True]])
    )
    np.testing.assert_array_equal(restricted.active[:, 0], [True, False, True])
    assert restricted.joint_prob[0] == pytest.approx(0.92)
