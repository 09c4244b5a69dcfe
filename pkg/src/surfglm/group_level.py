"""Group-level combination of single-subject EM fits.

Subjects contribute their sufficient statistics and hyperparameters. The group Theta is a
weighted mean of the subjects' log-hyperparameters; its spread is the weighted
between-subject variance divided by the number of subjects (the precisions of the
subject estimates summed). Every group draw refits the pooled posterior at a sampled
Theta and samples the field from it.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .config import DEFAULT_ALPHA, DEFAULT_GAMMAS, MIN_GROUP_DRAWS, parallel_map
from .em_engine import EmWorkspace, PosteriorField, SufficientStats, e_step
from .excursions import ExcursionResult, excursion_from_draws
from .mesh import FemOperators, Projector
from .spde_prior import Hyperparameters

logger = logging.getLogger(__name__)

__all__ = ["SubjectMismatchError", "SubjectSummary", "GroupResult", "combine_subjects"]


class SubjectMismatchError(ValueError):
    pass


@dataclass(eq=False)
class SubjectSummary:
    stats: SufficientStats
    theta: Hyperparameters
    weight: float | None = None  # None means the subject's T N
    name: str = ""

    @property
    def effective_weight(self) -> float:
        return float(self.stats.TN if self.weight is None else self.weight)


@dataclass(eq=False)
class GroupResult:
    theta_G: Hyperparameters
    log_theta_var: np.ndarray  # sampling variance of the group log-hyperparameters
    theta_draws: list[Hyperparameters]
    beta_G_samples: np.ndarray  # (S, K, n) mesh-level draws
    posterior: PosteriorField  # pooled posterior at theta_G
    weights: np.ndarray
    pooling: str
    excursions: dict[float, ExcursionResult] = field(default_factory=dict)

    @property
    def draws(self) -> int:
        return self.beta_G_samples.shape[0]

    @property
    def mean_fields(self) -> np.ndarray:
        """(K, n) average of the group draws."""
        return self.beta_G_samples.mean(axis=0)


def _check_subjects(summaries: Sequence[SubjectSummary], fem: FemOperators) -> tuple[int, int]:
    n, K = fem.n, summaries[0].stats.K
    for i, s in enumerate(summaries):
        label = s.name or f"#{i}"
        if s.stats.n != n:
            raise SubjectMismatchError(f"subject {label}: mesh has {s.stats.n} vertices, expected {n}")
        if s.stats.K != K or s.theta.K != K:
            raise SubjectMismatchError(
                f"subject {label}: {s.stats.K} tasks in statistics and {s.theta.K} in theta, "
                f"expected {K}"
            )
        if not s.effective_weight > 0:
            raise SubjectMismatchError(f"subject {label}: weight must be positive")
    return n, K


def combine_subjects(
    summaries: Sequence[SubjectSummary],
    fem: FemOperators,
    draws: int = 200,
    *,
    pooling: Literal["sum", "average"] = "sum",
    projector: Projector | None = None,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> GroupResult:
    """Group Theta, group posterior draws and nested group excursion sets.

    pooling="sum" adds the subjects' statistics as they are. pooling="average" scales
    each subject's statistics by its normalized weight, which keeps the group posterior
    on the scale of a single subject.
    """
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ValueError(f"need at least 2 subjects, got {len(summaries)}")
    if draws < MIN_GROUP_DRAWS:
        raise ValueError(f"need at least {MIN_GROUP_DRAWS} draws, got {draws}")
    if pooling not in ("sum", "average"):
        raise ValueError(f"unknown pooling '{pooling}'")
    n, K = _check_subjects(summaries, fem)
    M = len(summaries)

    w = np.array([s.effective_weight for s in summaries])
    p = w / w.sum()
    logs = np.stack([s.theta.to_log_vector() for s in summaries])
    center = p @ logs
    between = p @ (logs - center) ** 2
    spread = between / M
    theta_G = Hyperparameters.from_log_vector(center)
    logger.info(
        f"group of {M}: kappa2={np.round(theta_G.kappa2, 4).tolist()}, "
        f"phi={np.round(theta_G.phi, 6).tolist()}, sigma2={theta_G.sigma2:.4g}"
    )

    pooled = SufficientStats.pool(
        [s.stats for s in summaries], weights=None if pooling == "sum" else p
    )
    # one symbolic analysis for the pooled posterior and every drawn theta
    workspace = EmWorkspace(pooled, fem)
    posterior = e_step(pooled, theta_G, fem, workspace=workspace)

    streams = np.random.SeedSequence(seed).spawn(draws)
    fixed = not np.any(spread > 0)
    if fixed:
        logger.info("no between-subject variation: all draws from the pooled posterior")

    def one_draw(ss: np.random.SeedSequence) -> tuple[Hyperparameters, np.ndarray]:
        rng = np.random.default_rng(ss)
        if fixed:
            return theta_G, posterior.sample(rng, 1)[0]
        th = Hyperparameters.from_log_vector(center + np.sqrt(spread) * rng.standard_normal(center.size))
        return th, e_step(pooled, th, fem, workspace=workspace).sample(rng, 1)[0]

    results = parallel_map(one_draw, streams)
    thetas = [th for th, _ in results]
    samples = np.stack([b for _, b in results]).reshape(draws, K, n)

    result = GroupResult(
        theta_G=theta_G,
        log_theta_var=spread,
        theta_draws=thetas,
        beta_G_samples=samples,
        posterior=posterior,
        weights=w,
        pooling=pooling,
    )
    if gammas:
        projector = projector or Projector.eye(n)
        at_data = np.stack([projector.project(samples[s].T) for s in range(draws)])  # (S, N, K)
        allowed = None
        for gamma in sorted(gammas):
            res = excursion_from_draws(at_data, gamma, alpha, allowed=allowed)
            result.excursions[float(gamma)] = res
            allowed = res.active
        logger.info(
            "group excursions: "
            + ", ".join(f"gamma={g}: {r.counts.tolist()}" for g, r in result.excursions.items())
        )
    return result
