"""Per-location least squares baseline and its t-test activations."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
import scipy.sparse as sp
from scipy import stats as sps_stats
from scipy.sparse.linalg import spsolve

from .preprocess import SessionData

if TYPE_CHECKING:
    from .em_engine import SufficientStats

logger = logging.getLogger(__name__)

__all__ = ["ClassicalFit", "fit_classical", "activation_ttest", "mesh_estimate_from_stats"]


@dataclass
class ClassicalFit:
    beta_hat: np.ndarray  # (N, K)
    se: np.ndarray  # (N, K)
    resid_var: np.ndarray  # (N,)
    dof: int
    rank_deficient: np.ndarray  # (N,) bool

    @property
    def N(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def K(self) -> int:
        return self.beta_hat.shape[1]


def fit_classical(data: SessionData) -> ClassicalFit:
    """beta_v = (X_v'X_v)^-1 X_v'Y_v with a T - K residual variance denominator."""
    T, N, K = data.T, data.N, data.K
    Y = data.Y
    dof = T - K

    if data.shared_design:
        X = data.X
        deficient = np.linalg.matrix_rank(X) < K
        xtx = np.broadcast_to(X.T @ X, (N, K, K))
        beta = (np.linalg.pinv(X) @ Y).T if deficient else np.linalg.solve(X.T @ X, X.T @ Y).T
        rank_deficient = np.full(N, deficient)
        fitted = X @ beta.T
    else:
        X = data.X
        xtx = np.einsum("tnk,tnl->nkl", X, X)
        xty = np.einsum("tnk,tn->nk", X, Y)
        rank_deficient = np.linalg.matrix_rank(xtx) < K
        beta = np.empty((N, K))
        ok = ~rank_deficient
        if ok.any():
            beta[ok] = np.linalg.solve(xtx[ok], xty[ok][..., None])[..., 0]
        if rank_deficient.any():
            beta[rank_deficient] = np.einsum(
                "nkl,nl->nk", np.linalg.pinv(xtx[rank_deficient]), xty[rank_deficient]
            )
        fitted = np.einsum("tnk,nk->tn", X, beta)

    resid_var = np.sum((Y - fitted) ** 2, axis=0) / dof
    se = np.full((N, K), np.nan)
    ok = ~rank_deficient
    if ok.any():
        inv_diag = np.diagonal(np.linalg.inv(xtx[ok]), axis1=1, axis2=2)
        se[ok] = np.sqrt(resid_var[ok, None] * inv_diag)
    if rank_deficient.any():
        logger.warning(f"rank-deficient design at {int(rank_deficient.sum())} locations")
    return ClassicalFit(
        beta_hat=beta, se=se, resid_var=resid_var, dof=dof, rank_deficient=rank_deficient
    )


def activation_ttest(
    fit: ClassicalFit,
    gamma: float = 0.0,
    alpha: float = 0.05,
    correction: Literal["none", "bonferroni"] = "none",
) -> np.ndarray:
    """One-sided t-test of beta > gamma at level alpha; boolean (N, K)."""
    if correction not in ("none", "bonferroni"):
        raise ValueError(f"unknown correction '{correction}'")
    level = alpha / (fit.N * fit.K) if correction == "bonferroni" else alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (fit.beta_hat - gamma) / fit.se
        p = sps_stats.t.sf(t, fit.dof)
    active = p < level
    active[fit.rank_deficient] = False
    return active


def mesh_estimate_from_stats(stats: SufficientStats, ridge: float = 1e-8) -> np.ndarray:
    """Pooled least squares on the mesh, (K, n), from sufficient statistics.

    Equals the per-location classical estimate when data sit on the vertices; the small
    ridge keeps vertices without data at zero.
    """
    XtX = sp.csc_matrix(stats.XtX)
    scale = float(np.abs(XtX.diagonal()).max()) or 1.0
    A = XtX + ridge * scale * sp.identity(XtX.shape[0], format="csc")
    beta = spsolve(A.tocsc(), stats.Xty)
    return np.asarray(beta).reshape(stats.K, stats.n)
