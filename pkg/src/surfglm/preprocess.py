"""Preprocessing: HRF convolution, percent-signal-change scaling, nuisance regression and
AR prewhitening with spatially smoothed coefficients."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .config import AR_SHRINK_FACTOR, DEFAULT_AR_ORDER, DEFAULT_FWHM_MM, DEFAULT_TR
from .mesh import TriangularMesh

logger = logging.getLogger(__name__)

__all__ = [
    "PreprocessError",
    "NonstationaryError",
    "HrfParams",
    "SessionData",
    "PrewhitenModel",
    "hrf_eval",
    "hrf_kernel",
    "convolve_and_scale",
    "scale_bold",
    "nuisance_regress",
    "autocovariance",
    "levinson_durbin",
    "fit_ar",
    "ar_autocovariance",
    "ar_covariance_matrix",
    "is_stationary",
    "stabilize_ar",
    "smooth_on_mesh",
    "whiten",
    "whitening_matrix",
    "prewhiten",
    "preprocess_session",
]


class PreprocessError(ValueError):
    pass


class NonstationaryError(PreprocessError):
    pass


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma HRF shape (a), scale (b, seconds), undershoot ratio (c) and TR."""

    a1: float = 6.0
    a2: float = 12.0
    b1: float = 0.9
    b2: float = 0.9
    c: float = 0.35
    TR: float = DEFAULT_TR
    duration: float = 32.0

    def __post_init__(self) -> None:
        bad = [k for k, v in asdict(self).items() if not v > 0]
        if bad:
            raise PreprocessError(f"HRF parameters must be positive: {', '.join(bad)}")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> HrfParams:
        return cls(**{k: float(v) for k, v in data.items()})


def hrf_eval(t, p: HrfParams | None = None):
    """h(t) = (t/d1)^a1 e^{-(t-d1)/b1} - c (t/d2)^a2 e^{-(t-d2)/b2}, d_i = a_i b_i."""
    p = p or HrfParams()
    t_arr = np.asarray(t, dtype=float)
    if (t_arr < 0).any():
        raise PreprocessError("HRF is only defined for t >= 0")
    d1, d2 = p.a1 * p.b1, p.a2 * p.b2
    h = (t_arr / d1) ** p.a1 * np.exp(-(t_arr - d1) / p.b1) - p.c * (t_arr / d2) ** p.a2 * np.exp(
        -(t_arr - d2) / p.b2
    )
    return float(h) if np.ndim(t) == 0 else h


def hrf_kernel(p: HrfParams) -> np.ndarray:
    return hrf_eval(np.arange(0.0, p.duration, p.TR), p)


def convolve_and_scale(
    design: np.ndarray, p: HrfParams | None = None, names: Sequence[str] | None = None
) -> np.ndarray:
    """Convolve each stimulus column with the HRF, divide by its max, then center."""
    p = p or HrfParams()
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    T, K = design.shape
    names = list(names) if names is not None else [f"task{k}" for k in range(K)]
    if (design < 0).any():
        raise PreprocessError("stimulus indicators must be nonnegative")
    kernel = hrf_kernel(p)
    out = np.empty_like(design)
    for k in range(K):
        if not design[:, k].any():
            raise PreprocessError(f"stimulus for task '{names[k]}' is all zero")
        col = np.convolve(design[:, k], kernel)[:T]
        col /= col.max()
        out[:, k] = col - col.mean()
    return out


def scale_bold(Y: np.ndarray) -> np.ndarray:
    """100 (Y_v - mean_v) / mean_v per location. Not idempotent."""
    Y = np.asarray(Y, dtype=float)
    means = Y.mean(axis=0)
    flat = np.flatnonzero(np.abs(means) <= 1e-12 * max(1.0, float(np.abs(means).max())))
    if flat.size:
        shown = ", ".join(str(i) for i in flat[:20])
        raise PreprocessError(f"zero temporal mean (flat or empty) at locations: {shown}")
    return 100.0 * (Y - means) / means


def _first_dependent_column(Z: np.ndarray) -> int | None:
    for j in range(1, Z.shape[1] + 1):
        if np.linalg.matrix_rank(Z[:, :j]) < j:
            return j - 1
    return None


def nuisance_regress(Y: np.ndarray, Z: np.ndarray | None) -> np.ndarray:
    """Residuals of Y after least-squares regression on the columns of Z."""
    Y = np.asarray(Y, dtype=float)
    if Z is None or np.size(Z) == 0:
        return Y.copy()
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != Y.shape[0]:
        raise PreprocessError(f"nuisance matrix has {Z.shape[0]} rows, response has {Y.shape[0]}")
    dep = _first_dependent_column(Z)
    if dep is not None:
        raise PreprocessError(f"nuisance matrix is rank deficient: column {dep} is dependent")
    coef, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    return Y - Z @ coef


def autocovariance(x: np.ndarray, maxlag: int) -> np.ndarray:
    """Biased sample autocovariances r_0..r_maxlag of each column, (maxlag+1, N)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T = x.shape[0]
    x = x - x.mean(axis=0)
    return np.stack([np.einsum("tn,tn->n", x[lag:], x[: T - lag]) / T for lag in range(maxlag + 1)])


def levinson_durbin(r: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Yule-Walker AR fit from autocovariances by the Levinson-Durbin recursion.

    `r` is (order+1,) or (order+1, N). Returns coefficients a (x_t = sum_j a_j x_{t-j} + e_t)
    shaped (order,) / (N, order) and the innovation variances.
    """
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    if single:
        r = r[:, None]
    N = r.shape[1]
    a = np.zeros((N, order))
    err = r[0].copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(1, order + 1):
            acc = r[k] - np.einsum("nj,jn->n", a[:, : k - 1], r[k - 1 : 0 : -1]) if k > 1 else r[k]
            refl = np.where(err > 0, acc / err, 0.0)
            prev = a[:, : k - 1].copy()
            a[:, : k - 1] = prev - refl[:, None] * prev[:, ::-1]
            a[:, k - 1] = refl
            err = err * (1.0 - refl**2)
    if single:
        return a[0], err[0]
    return a, err


def fit_ar(resid: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-column AR(order) coefficients (N, order) and innovation variances (N,)."""
    return levinson_durbin(autocovariance(resid, order), order)


def ar_autocovariance(a: np.ndarray, var, nlags: int) -> np.ndarray:
    """Theoretical autocovariances gamma_0..gamma_nlags of stationary AR processes.

    Solves gamma_k - sum_j a_j gamma_|k-j| = var * [k == 0] for k = 0..p, then extends
    with the AR recursion. Batched over a leading axis when `a` is 2-D.
    """
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    var = np.broadcast_to(np.asarray(var, dtype=float), (a.shape[0],))
    N, p = a.shape
    M = np.broadcast_to(np.eye(p + 1), (N, p + 1, p + 1)).copy()
    for k in range(p + 1):
        for j in range(1, p + 1):
            M[:, k, abs(k - j)] -= a[:, j - 1]
    rhs = np.zeros((N, p + 1))
    rhs[:, 0] = var
    g = np.linalg.solve(M, rhs[..., None])[..., 0]
    out = np.zeros((N, max(nlags, p) + 1))
    out[:, : p + 1] = g
    for k in range(p + 1, nlags + 1):
        out[:, k] = np.einsum("nj,nj->n", a, out[:, k - 1 : k - p - 1 : -1])
    out = out[:, : nlags + 1]
    return out[0] if single else out


def ar_covariance_matrix(a: np.ndarray, var: float, T: int) -> np.ndarray:
    """Dense T x T Toeplitz covariance S of a stationary AR process."""
    from scipy.linalg import toeplitz

    return toeplitz(ar_autocovariance(a, var, T - 1))


def is_stationary(a: np.ndarray) -> np.ndarray:
    """True where every root of 1 - sum_j a_j z^j lies outside the unit circle."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    N, p = a.shape
    if p == 0:
        return np.ones(N, dtype=bool)
    comp = np.zeros((N, p, p))
    comp[:, 0, :] = a
    comp[:, np.arange(1, p), np.arange(p - 1)] = 1.0
    return np.abs(np.linalg.eigvals(comp)).max(axis=1) < 1.0


def stabilize_ar(a: np.ndarray, shrink: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Shrink nonstationary rows radially by AR_SHRINK_FACTOR until stationary.

    Returns the coefficients and a per-row flag of which rows were shrunk.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float)).copy()
    bad = ~is_stationary(a)
    shrunk = bad.copy()
    if bad.any() and not shrink:
        raise NonstationaryError(
            f"smoothed AR fit is nonstationary at location {int(np.flatnonzero(bad)[0])}"
        )
    while bad.any():
        a[bad] *= AR_SHRINK_FACTOR
        bad[bad] = ~is_stationary(a[bad])
    if shrunk.any():
        logger.warning(f"shrank nonstationary AR coefficients at {int(shrunk.sum())} locations")
    return a, shrunk


def smooth_on_mesh(values: np.ndarray, mesh: TriangularMesh, fwhm: float) -> np.ndarray:
    """Gaussian kernel average over graph-geodesic distances, truncated at 3 x FWHM."""
    values = np.asarray(values, dtype=float)
    if fwhm <= 0 or values.size == 0:
        return values.copy()
    if values.shape[0] != mesh.n:
        raise PreprocessError(
            f"smoothing needs one value per mesh vertex ({mesh.n}), got {values.shape[0]}"
        )
    sigma = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    W = mesh.graph_distances(limit=3.0 * fwhm)
    W.data = np.exp(-(W.data**2) / (2.0 * sigma**2))
    rowsum = np.asarray(W.sum(axis=1)).ravel()
    flat = values.reshape(values.shape[0], -1)
    return (np.asarray(W @ flat) / rowsum[:, None]).reshape(values.shape)


def whiten(x: np.ndarray, a: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Premultiply each location's series by D (D S D' = I for its AR covariance S).

    x is (T, N) or (T, N, K); a is (N, p), var (N,). Rows t >= p are the scaled
    innovations (x_t - sum_j a_j x_{t-j}) / sqrt(var); the first p rows are decorrelated
    with the inverse Cholesky factor of their stationary covariance.
    """
    x = np.asarray(x, dtype=float)
    a = np.atleast_2d(a)
    var = np.asarray(var, dtype=float)
    N, p = a.shape
    T = x.shape[0]
    if T <= p:
        raise PreprocessError(f"need more than {p} time points to whiten, got {T}")
    extra = (None,) * (x.ndim - 2)
    out = x.copy()
    for j in range(1, p + 1):
        out[j:] -= a[(slice(None), j - 1, *extra)] * x[:-j]
    out[p:] /= np.sqrt(var)[(slice(None), *extra)]
    if p:
        gamma = ar_autocovariance(a, var, p - 1)
        idx = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        chol = np.linalg.cholesky(gamma[:, idx])
        head = np.moveaxis(x[:p].reshape(p, N, -1), 0, 1)
        solved = np.linalg.solve(chol, head)
        out[:p] = np.moveaxis(solved, 1, 0).reshape(x[:p].shape)
    return out


def whitening_matrix(a: np.ndarray, var: float, T: int) -> np.ndarray:
    """Dense T x T D for one AR model."""
    eye = np.eye(T)[:, None, :]
    return whiten(eye, np.atleast_2d(a), np.atleast_1d(var))[:, 0, :]


@dataclass
class PrewhitenModel:
    """Smoothed per-location AR coefficients (N, order) and innovation variances (N,)."""

    coefs: np.ndarray
    variances: np.ndarray
    fwhm: float
    shrunk: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def order(self) -> int:
        return self.coefs.shape[1]

    def matrix(self, location: int, T: int) -> np.ndarray:
        return whitening_matrix(self.coefs[location], self.variances[location], T)


@dataclass
class SessionData:
    """One run: Y (T, N), design X (T, K) shared or (T, N, K) per location, nuisance Z."""

    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray | None = None
    TR: float = DEFAULT_TR
    whitened: bool = False
    task_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.Y = np.asarray(self.Y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.Y.ndim != 2:
            raise PreprocessError(f"Y must be (T, N), got {self.Y.shape}")
        if self.X.shape[0] != self.T or self.X.ndim not in (2, 3):
            raise PreprocessError(f"X must be (T, K) or (T, N, K) with T={self.T}, got {self.X.shape}")
        if self.X.ndim == 3 and self.X.shape[1] != self.N:
            raise PreprocessError(f"per-location X has {self.X.shape[1]} locations, Y has {self.N}")
        J = 0 if self.Z is None else np.atleast_2d(self.Z.T).shape[0]
        if self.T <= self.K + J:
            raise PreprocessError(f"need T > K + J, got T={self.T}, K={self.K}, J={J}")
        if not (np.isfinite(self.Y).all() and np.isfinite(self.X).all()):
            raise PreprocessError("response and design must not contain missing values")
        if self.task_names is None:
            self.task_names = [f"task{k}" for k in range(self.K)]

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[-1]

    @property
    def shared_design(self) -> bool:
        return self.X.ndim == 2

    def design_at(self) -> np.ndarray:
        """Per-location design view, (T, N, K)."""
        if self.shared_design:
            return np.broadcast_to(self.X[:, None, :], (self.T, self.N, self.K))
        return self.X


def _ols_residuals(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    if X.ndim == 2:
        coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
        return Y - X @ coef
    xtx = np.einsum("tnk,tnl->nkl", X, X)
    xty = np.einsum("tnk,tn->nk", X, Y)
    beta = np.linalg.solve(xtx, xty[..., None])[..., 0]
    return Y - np.einsum("tnk,nk->tn", X, beta)


def prewhiten(
    Y: np.ndarray,
    X: np.ndarray,
    mesh: TriangularMesh,
    order: int = DEFAULT_AR_ORDER,
    fwhm: float = DEFAULT_FWHM_MM,
    shrink: bool = True,
) -> tuple[np.ndarray, np.ndarray, PrewhitenModel]:
    """Fit AR(order) to OLS residuals, smooth over the mesh, whiten Y and X.

    Returns whitened Y (T, N), per-location whitened X (T, N, K) and the model.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    T, N = Y.shape
    K = X.shape[-1]
    if T <= order + K:
        raise PreprocessError(f"need T > order + K, got T={T}, order={order}, K={K}")

    resid = _ols_residuals(Y, X)
    coefs, variances = fit_ar(resid, order)
    coefs = smooth_on_mesh(coefs, mesh, fwhm)
    variances = smooth_on_mesh(variances, mesh, fwhm)
    dead = np.flatnonzero(~(variances > 0))
    if dead.size:
        shown = ", ".join(str(i) for i in dead[:20])
        raise PreprocessError(f"zero residual variance at locations: {shown}")
    coefs, shrunk = stabilize_ar(coefs, shrink=shrink)
    logger.debug(
        f"AR({order}) fit: mean lag-1 coefficient {coefs[:, 0].mean() if order else 0.0:.3f}, "
        f"mean innovation variance {variances.mean():.4g}"
    )

    Xfull = X if X.ndim == 3 else np.broadcast_to(X[:, None, :], (T, N, K))
    Yw = whiten(Y, coefs, variances)
    Xw = whiten(Xfull, coefs, variances)
    return Yw, Xw, PrewhitenModel(coefs=coefs, variances=variances, fwhm=fwhm, shrunk=shrunk)


def preprocess_session(
    Y_raw: np.ndarray,
    stimulus: np.ndarray,
    mesh: TriangularMesh,
    Z: np.ndarray | None = None,
    hrf: HrfParams | None = None,
    order: int = DEFAULT_AR_ORDER,
    fwhm: float = DEFAULT_FWHM_MM,
    task_names: Sequence[str] | None = None,
    scale: bool = True,
) -> tuple[SessionData, PrewhitenModel]:
    """Scale the response, convolve the design, regress nuisance, prewhiten."""
    hrf = hrf or HrfParams()
    names = list(task_names) if task_names is not None else None
    Y = scale_bold(Y_raw) if scale else np.asarray(Y_raw, dtype=float)
    logger.info(f"scaled response: T={Y.shape[0]}, N={Y.shape[1]}")
    X = convolve_and_scale(stimulus, hrf, names)
    Y = nuisance_regress(Y, Z)
    if Z is not None:
        logger.info(f"regressed out {np.atleast_2d(Z.T).shape[0]} nuisance columns")
    Yw, Xw, model = prewhiten(Y, X, mesh, order=order, fwhm=fwhm)
    logger.info(f"prewhitened with AR({order}), FWHM {fwhm} mm")
    session = SessionData(Y=Yw, X=Xw, Z=None, TR=hrf.TR, whitened=True, task_names=names)
    return session, model
