"""Joint excursion sets: locations jointly above gamma with posterior probability >= 1 - alpha.

Candidates are locations whose marginal probability already reaches 1 - alpha, taken in
decreasing order of that probability. The set is the longest prefix whose Monte Carlo
joint probability (every member above gamma in the same draw) stays >= 1 - alpha.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .config import DEFAULT_ALPHA, DEFAULT_SAMPLES, MIN_SAMPLES, SAMPLE_CHUNK, parallel_map
from .em_engine import PosteriorField, PosteriorPrecisionError
from .mesh import Projector

logger = logging.getLogger(__name__)

__all__ = [
    "ExcursionResult",
    "excursion_set",
    "excursion_sets",
    "excursion_from_draws",
    "projected_moments",
]


@dataclass
class ExcursionResult:
    active: np.ndarray  # (N, K) bool
    joint_prob: np.ndarray  # (K,)
    marginal_prob: np.ndarray  # (N, K)
    gamma: float
    alpha: float
    samples: int

    @property
    def counts(self) -> np.ndarray:
        return self.active.sum(axis=0)


def _check_level(alpha: float, samples: int, minimum: int) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if samples < minimum:
        raise ValueError(f"need at least {minimum} samples, got {samples}")


def _depths(exceed: np.ndarray) -> np.ndarray:
    """Per draw, how many leading candidates are above threshold. exceed is (S, m)."""
    if exceed.shape[1] == 0:
        return np.zeros(exceed.shape[0], dtype=np.int64)
    first_fail = np.argmin(exceed, axis=1)
    return np.where(exceed.all(axis=1), exceed.shape[1], first_fail)


def _longest_prefix(depths: np.ndarray, m: int, alpha: float) -> tuple[int, float]:
    """Largest prefix length whose joint probability is >= 1 - alpha, and that probability."""
    S = len(depths)
    # survival[j] = fraction of draws with depth >= j, j = 0..m
    survival = np.cumsum(np.bincount(depths, minlength=m + 1)[::-1])[::-1] / S
    ok = np.flatnonzero(survival >= 1.0 - alpha)
    size = int(ok.max()) if ok.size else 0
    return size, float(survival[size])


def _ordered_candidates(marginal: np.ndarray, alpha: float, allowed: np.ndarray | None) -> np.ndarray:
    mask = marginal >= 1.0 - alpha
    if allowed is not None:
        mask &= allowed
    idx = np.flatnonzero(mask)
    return idx[np.argsort(-marginal[idx], kind="stable")]


def projected_moments(post: PosteriorField, projector: Projector) -> tuple[np.ndarray, np.ndarray]:
    """Mean and marginal standard deviation of Psi w_k at the data locations, (N, K) each."""
    if post.factor is None:
        raise PosteriorPrecisionError("posterior has no factorization")
    n, K = post.n, post.K
    mean = np.column_stack([projector.project(post.task_mean(k)) for k in range(K)])
    sel = post.selected_inverse

    if projector.identity:
        var = sel.diagonal().reshape(K, n).T
    else:
        Psi = projector.Psi.tocsr()
        counts = np.diff(Psi.indptr)
        width = max(int(counts.max()), 1)
        N = Psi.shape[0]
        cols = np.zeros((N, width), dtype=np.int64)
        wts = np.zeros((N, width))
        for r in range(width):
            has = counts > r
            pos = Psi.indptr[:-1][has] + r
            cols[has, r] = Psi.indices[pos]
            wts[has, r] = Psi.data[pos]
            # pad with the row's first vertex so every pair stays inside one triangle
            cols[~has, r] = cols[~has, 0]
        var = np.empty((N, K))
        a = np.repeat(cols[:, :, None], width, axis=2)
        b = np.repeat(cols[:, None, :], width, axis=1)
        ww = wts[:, :, None] * wts[:, None, :]
        for k in range(K):
            ent = sel.entries((a + k * n).ravel(), (b + k * n).ravel()).reshape(a.shape)
            var[:, k] = np.einsum("nij,nij->n", ww, ent)
    if (var <= 0).any():
        raise PosteriorPrecisionError("posterior marginal variances must be positive")
    return mean, np.sqrt(var)


def excursion_set(
    post: PosteriorField,
    projector: Projector,
    gamma: float,
    alpha: float = DEFAULT_ALPHA,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    allowed: np.ndarray | None = None,
) -> ExcursionResult:
    """Joint excursion set of the projected field Psi w above gamma, per task.

    `allowed` (N, K) optionally restricts the candidates, e.g. to the set found at a
    lower threshold.
    """
    _check_level(alpha, samples, MIN_SAMPLES)
    mean, sd = projected_moments(post, projector)
    N, K = mean.shape
    marginal = norm.sf((gamma - mean) / sd)
    order = [
        _ordered_candidates(marginal[:, k], alpha, None if allowed is None else allowed[:, k])
        for k in range(K)
    ]

    chunks = [min(SAMPLE_CHUNK, samples - s) for s in range(0, samples, SAMPLE_CHUNK)]
    streams = np.random.SeedSequence(seed).spawn(len(chunks))

    def run_chunk(job: tuple[int, np.random.SeedSequence]) -> np.ndarray:
        size, ss = job
        draws = post.sample(np.random.default_rng(ss), size)  # (size, nK)
        out = np.empty((size, K), dtype=np.int64)
        for k in range(K):
            fields = projector.project(draws[:, k * post.n : (k + 1) * post.n].T).T
            out[:, k] = _depths(fields[:, order[k]] > gamma)
        return out

    depths = np.concatenate(parallel_map(run_chunk, list(zip(chunks, streams))))

    active = np.zeros((N, K), dtype=bool)
    joint = np.ones(K)
    for k in range(K):
        size, joint[k] = _longest_prefix(depths[:, k], len(order[k]), alpha)
        active[order[k][:size], k] = True
    logger.info(
        f"excursions gamma={gamma}: {active.sum(axis=0).tolist()} active locations, "
        f"joint probability {np.round(joint, 4).tolist()}"
    )
    return ExcursionResult(
        active=active, joint_prob=joint, marginal_prob=marginal, gamma=gamma, alpha=alpha, samples=samples
    )


def excursion_sets(
    post: PosteriorField,
    projector: Projector,
    gammas: Sequence[float],
    alpha: float = DEFAULT_ALPHA,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> dict[float, ExcursionResult]:
    """Excursion sets for several thresholds, nested by construction: each set is searched
    only inside the set of the next lower threshold."""
    results: dict[float, ExcursionResult] = {}
    allowed = None
    for gamma in sorted(gammas):
        res = excursion_set(post, projector, gamma, alpha, samples, seed, allowed=allowed)
        results[float(gamma)] = res
        allowed = res.active
    return results


def excursion_from_draws(
    draws: np.ndarray,
    gamma: float,
    alpha: float = DEFAULT_ALPHA,
    allowed: np.ndarray | None = None,
) -> ExcursionResult:
    """Excursion set from precomputed draws at the data locations, (S, N, K)."""
    draws = np.asarray(draws, dtype=float)
    S, N, K = draws.shape
    _check_level(alpha, S, 1)
    exceed = draws > gamma
    marginal = exceed.mean(axis=0)
    active = np.zeros((N, K), dtype=bool)
    joint = np.ones(K)
    for k in range(K):
        order = _ordered_candidates(
            marginal[:, k], alpha, None if allowed is None else allowed[:, k]
        )
        size, joint[k] = _longest_prefix(_depths(exceed[:, order, k]), len(order), alpha)
        active[order[:size], k] = True
    return ExcursionResult(
        active=active, joint_prob=joint, marginal_prob=marginal, gamma=gamma, alpha=alpha, samples=S
    )
