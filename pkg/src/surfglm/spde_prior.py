"""SPDE (alpha = 2) Matern precision on a mesh in the (kappa^2, phi) parameterization.

    Qtilde(kappa2) = kappa2 C + 2 G + kappa2^-1 G C^-1 G
    Q_k            = (c1 / phi_k) Qtilde(kappa2_k),   phi = c1 / (kappa^2 tau^2)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any

import numpy as np
import scipy.sparse as sp

from .config import C1
from .linalg import AlignedSum, SymbolicCache, factorize
from .mesh import FemOperators

logger = logging.getLogger(__name__)

__all__ = [
    "HyperparameterError",
    "Hyperparameters",
    "QtildeAssembler",
    "PrecisionOperator",
    "qtilde_assembler",
    "build_qtilde",
    "logdet_q",
    "prior_quadform",
    "sample_prior_field",
]


class HyperparameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    """Theta = {kappa2_k, phi_k, sigma2}; tau2 is derived."""

    kappa2: np.ndarray
    phi: np.ndarray
    sigma2: float
    c1: float = field(default=C1, repr=False)

    def __post_init__(self) -> None:
        kappa2 = np.atleast_1d(np.asarray(self.kappa2, dtype=float)).copy()
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float)).copy()
        if kappa2.shape != phi.shape or kappa2.ndim != 1:
            raise HyperparameterError(
                f"kappa2 and phi need one entry per task, got {kappa2.shape} and {phi.shape}"
            )
        for name, vals in (("kappa2", kappa2), ("phi", phi), ("sigma2", [self.sigma2])):
            if not np.all(np.isfinite(vals)) or np.any(np.asarray(vals) <= 0):
                raise HyperparameterError(f"{name} must be finite and positive, got {vals}")
        kappa2.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, "kappa2", kappa2)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def K(self) -> int:
        return len(self.kappa2)

    @property
    def tau2(self) -> np.ndarray:
        return self.c1 / (self.phi * self.kappa2)

    @classmethod
    def from_tau(cls, kappa2, tau2, sigma2: float) -> Hyperparameters:
        kappa2 = np.asarray(kappa2, dtype=float)
        return cls(kappa2=kappa2, phi=C1 / (kappa2 * np.asarray(tau2, dtype=float)), sigma2=sigma2)

    def with_task(self, k: int, *, kappa2: float | None = None, phi: float | None = None):
        kap, ph = self.kappa2.copy(), self.phi.copy()
        if kappa2 is not None:
            kap[k] = kappa2
        if phi is not None:
            ph[k] = phi
        return replace(self, kappa2=kap, phi=ph)

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.concatenate([self.kappa2, self.phi, [self.sigma2]]))

    @classmethod
    def from_log_vector(cls, x: np.ndarray) -> Hyperparameters:
        K = (len(x) - 1) // 2
        v = np.exp(np.asarray(x, dtype=float))
        return cls(kappa2=v[:K], phi=v[K : 2 * K], sigma2=float(v[-1]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.kappa2, self.phi, [self.sigma2]])

    def change(self, other: Hyperparameters, relative: bool = False) -> float:
        """Max absolute (or relative) componentwise difference to `other`."""
        a, b = self.to_vector(), other.to_vector()
        diff = np.abs(a - b)
        if relative:
            diff = diff / np.abs(b)
        return float(diff.max())

    def to_dict(self) -> dict[str, Any]:
        return {
            "kappa2": self.kappa2.tolist(),
            "phi": self.phi.tolist(),
            "sigma2": self.sigma2,
            "tau2": self.tau2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Hyperparameters:
        return cls(kappa2=data["kappa2"], phi=data["phi"], sigma2=data["sigma2"])


class QtildeAssembler:
    """Qtilde(kappa2) for one mesh on a fixed sparsity pattern.

    Also carries kappa2 C + G, whose determinant gives log|Qtilde| more cheaply:
    Qtilde = kappa2^-1 (kappa2 C + G) C^-1 (kappa2 C + G).
    """

    def __init__(self, fem: FemOperators) -> None:
        self.fem = fem
        self.n = fem.n
        self._qtilde = AlignedSum([fem.C, fem.G, fem.GCinvG])
        self._shifted = AlignedSum([fem.C, fem.G])
        self._logdet_c = float(np.sum(np.log(fem.c_diag)))
        self.cache = SymbolicCache()

    def qtilde(self, kappa2: float) -> sp.csc_matrix:
        if not kappa2 > 0:
            raise HyperparameterError(f"kappa2 must be positive, got {kappa2}")
        return self._qtilde.combine([kappa2, 2.0, 1.0 / kappa2])

    def logdet_qtilde(self, kappa2: float) -> float:
        if not kappa2 > 0:
            raise HyperparameterError(f"kappa2 must be positive, got {kappa2}")
        shifted = factorize(self._shifted.combine([kappa2, 1.0]), self.cache)
        return -self.n * math.log(kappa2) + 2.0 * shifted.logdet - self._logdet_c

    def component_traces(self, stats) -> tuple[float, float, float]:
        """Apply `stats(A)` (e.g. Tr(A E[ww'])) to C, G and G C^-1 G."""
        return stats(self.fem.C), stats(self.fem.G), stats(self.fem.GCinvG)


@lru_cache(maxsize=16)
def qtilde_assembler(fem: FemOperators) -> QtildeAssembler:
    return QtildeAssembler(fem)


def build_qtilde(kappa2: float, fem: FemOperators) -> sp.csc_matrix:
    """kappa2 C + 2 G + kappa2^-1 G C^-1 G."""
    return qtilde_assembler(fem).qtilde(float(kappa2))


@dataclass(frozen=True, eq=False)
class PrecisionOperator:
    """Block-diagonal prior precision over K task fields on one mesh."""

    qtildes: tuple[sp.csc_matrix, ...]
    scales: np.ndarray

    @classmethod
    def from_theta(cls, theta: Hyperparameters, fem: FemOperators) -> PrecisionOperator:
        qt = tuple(build_qtilde(k2, fem) for k2 in theta.kappa2)
        return cls(qtildes=qt, scales=theta.c1 / theta.phi)

    @property
    def n(self) -> int:
        return self.qtildes[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.qtildes)

    @property
    def Q(self) -> sp.csc_matrix:
        return sp.block_diag(
            [s * q for s, q in zip(self.scales, self.qtildes)], format="csc"
        )


def logdet_q(prec: PrecisionOperator, c1: float = C1) -> float:
    """log|Q| = nK log c1 - n sum log phi_k + sum log|Qtilde_k|."""
    n = prec.n
    phi = c1 / prec.scales
    logdets = [factorize(q).logdet for q in prec.qtildes]
    return n * prec.K * math.log(c1) - n * float(np.sum(np.log(phi))) + float(np.sum(logdets))


def prior_quadform(prec: PrecisionOperator, w: np.ndarray) -> float:
    """w' Q w for task-stacked w of length nK."""
    w = np.asarray(w, dtype=float).ravel()
    if w.size != prec.n * prec.K:
        raise HyperparameterError(f"w has length {w.size}, expected {prec.n * prec.K}")
    blocks = w.reshape(prec.K, prec.n)
    return float(sum(s * b @ (q @ b) for s, q, b in zip(prec.scales, prec.qtildes, blocks)))


def sample_prior_field(
    theta: Hyperparameters, fem: FemOperators, rng: np.random.Generator, size: int = 1
) -> np.ndarray:
    """Draws from N(0, Q_k^-1) for every task, shape (size, K, n)."""
    out = np.empty((size, theta.K, fem.n))
    for k, (k2, phi) in enumerate(zip(theta.kappa2, theta.phi)):
        q = (theta.c1 / phi) * build_qtilde(k2, fem)
        out[:, k, :] = factorize(q).sample(rng, size).T
    return out
