import math

import numpy as np
import pytest

from surfglm.em_engine import EmConfig, SufficientStats, e_step, run_em
from surfglm.group_level import SubjectMismatchError, SubjectSummary, combine_subjects
from surfglm.mesh import assemble_fem
from surfglm.simulator import SimConfig, score, simulate
from surfglm.spde_prior import Hyperparameters


@pytest.fixture
def subject_stats(small_grid, make_session, rng):
    return [SufficientStats.from_session(make_session(small_grid, 1, 30, rng)[0]) for _ in range(3)]


def _theta(kappa2: float, phi: float = 0.5, sigma2: float = 1.0) -> Hyperparameters:
    return Hyperparameters(kappa2=[kappa2], phi=[phi], sigma2=sigma2)


def test_identical_subjects_reproduce_their_theta(subject_stats, small_fem):
    theta = _theta(2.0)
    subjects = [SubjectSummary(subject_stats[0], theta), SubjectSummary(subject_stats[0], theta)]
    group = combine_subjects(subjects, small_fem, draws=100, gammas=())
    np.testing.assert_allclose(group.theta_G.to_vector(), theta.to_vector(), rtol=1e-12)
    np.testing.assert_allclose(group.log_theta_var, 0.0, atol=1e-24)
    assert all(th is group.theta_G for th in group.theta_draws)
    assert group.beta_G_samples.shape == (100, 1, small_fem.n)
    assert group.draws == 100
    assert group.excursions == {}


def test_group_theta_is_weighted_geometric_mean(subject_stats, small_fem):
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0), weight=1.0),
        SubjectSummary(subject_stats[1], _theta(16.0), weight=3.0),
    ]
    group = combine_subjects(subjects, small_fem, draws=100, gammas=())
    assert group.theta_G.kappa2[0] == pytest.approx(8.0, rel=1e-12)
    np.testing.assert_allclose(group.weights, [1.0, 3.0])


def test_spread_is_between_subject_variance_over_count(subject_stats, small_fem):
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0), weight=1.0),
        SubjectSummary(subject_stats[1], _theta(16.0), weight=1.0),
    ]
    group = combine_subjects(subjects, small_fem, draws=100, gammas=())
    assert group.theta_G.kappa2[0] == pytest.approx(4.0)
    # kappa2, phi, sigma2 in log space
    np.testing.assert_allclose(group.log_theta_var, [math.log(4.0) ** 2 / 2.0, 0.0, 0.0], atol=1e-12)
    drawn = np.array([th.kappa2[0] for th in group.theta_draws])
    assert len(set(drawn.tolist())) == 100
    assert np.log(drawn).std() == pytest.approx(math.log(4.0) / math.sqrt(2.0), rel=0.3)


def test_draws_share_one_workspace(subject_stats, small_fem, mocker):
    spy = mocker.patch("surfglm.group_level.e_step", wraps=e_step)
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0)),
        SubjectSummary(subject_stats[1], _theta(16.0)),
    ]
    combine_subjects(subjects, small_fem, draws=20, gammas=())
    assert spy.call_count == 21
    assert len({id(c.kwargs["workspace"]) for c in spy.call_args_list}) == 1


def test_subject_order_does_not_matter(subject_stats, small_fem):
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0, 0.3), weight=2.0),
        SubjectSummary(subject_stats[1], _theta(3.0, 0.6), weight=1.0),
        SubjectSummary(subject_stats[2], _theta(9.0, 0.9), weight=5.0),
    ]
    a = combine_subjects(subjects, small_fem, draws=100, gammas=())
    b = combine_subjects(subjects[::-1], small_fem, draws=100, gammas=())
    np.testing.assert_allclose(a.theta_G.to_vector(), b.theta_G.to_vector(), rtol=1e-12)
    np.testing.assert_allclose(a.posterior.mu, b.posterior.mu, rtol=1e-9, atol=1e-12)


def test_a_dominant_weight_wins(subject_stats, small_fem):
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0, 0.2, 2.0), weight=1.0),
        SubjectSummary(subject_stats[1], _theta(50.0, 0.9, 0.5), weight=1e9),
    ]
    group = combine_subjects(subjects, small_fem, draws=100, gammas=())
    np.testing.assert_allclose(group.theta_G.to_vector(), [50.0, 0.9, 0.5], rtol=1e-6)


def test_average_pooling_widens_the_posterior(subject_stats, small_fem):
    theta = _theta(2.0)
    subjects = [SubjectSummary(s, theta) for s in subject_stats[:2]]
    summed = combine_subjects(subjects, small_fem, draws=100, gammas=())
    averaged = combine_subjects(subjects, small_fem, draws=100, pooling="average", gammas=())
    # averaging weighs each subject by one half, so the group posterior is wider
    assert (averaged.posterior.marginal_variance() > summed.posterior.marginal_variance()).all()


def test_default_weight_is_observation_count(subject_stats):
    assert SubjectSummary(subject_stats[0], _theta(1.0)).effective_weight == subject_stats[0].TN


def test_mismatched_subject_is_named(subject_stats, small_fem, small_grid, make_session, rng):
    two_tasks = SufficientStats.from_session(make_session(small_grid, 2, 30, rng)[0])
    subjects = [
        SubjectSummary(subject_stats[0], _theta(1.0), name="sub-01"),
        SubjectSummary(two_tasks, Hyperparameters(kappa2=[1, 1], phi=[1, 1], sigma2=1.0), name="sub-02"),
    ]
    with pytest.raises(SubjectMismatchError, match="sub-02"):
        combine_subjects(subjects, small_fem, draws=100)


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"draws": 10}, "at least 100 draws"),
        ({"pooling": "median"}, "unknown pooling"),
    ],
)
def test_bad_arguments(subject_stats, small_fem, kwargs, message):
    subjects = [SubjectSummary(s, _theta(1.0)) for s in subject_stats[:2]]
    with pytest.raises(ValueError, match=message):
        combine_subjects(subjects, small_fem, **kwargs)


def test_single_subject_is_refused(subject_stats, small_fem):
    with pytest.raises(ValueError, match="at least 2 subjects"):
        combine_subjects([SubjectSummary(subject_stats[0], _theta(1.0))], small_fem)


def test_group_excursions_are_nested(subject_stats, small_fem):
    subjects = [SubjectSummary(s, _theta(0.5, 1.0)) for s in subject_stats]
    group = combine_subjects(subjects, small_fem, draws=100, gammas=(0.5, 0.0), alpha=0.1)
    assert list(group.excursions) == [0.0, 0.5]
    low, high = group.excursions[0.0].active, group.excursions[0.5].active
    assert not (high & ~low).any()
    assert group.excursions[0.0].samples == 100


@pytest.mark.slow
def test_ten_subject_group_recovers_the_group_field():
    config = SimConfig(n_vertices=900, K=1, T=200, subjects=10, subject_var=0.05, error_var=4.0, seed=11)
    sessions, truth, mesh = simulate(config)
    fem = assemble_fem(mesh)
    subjects = []
    for i, session in enumerate(sessions):
        result = run_em(session, fem, EmConfig())
        subjects.append(SubjectSummary(SufficientStats.from_session(session), result.theta, name=f"sub-{i:02d}"))
    group = combine_subjects(subjects, fem, draws=100, gammas=(0.0,))
    single = run_em(sessions[0], fem, EmConfig()).posterior.mean_fields
    assert score(group.mean_fields, truth).rmse < score(single, truth).rmse
    hits = group.excursions[0.0].active[:, 0]
    assert hits[truth.masks[0]].mean() > hits[~truth.masks[0]].mean()
