"""EM estimation of the spatial Bayesian GLM.

E-step: Gaussian posterior of the task-stacked mesh coefficients w given Theta.
M-step: closed form sigma^2 and phi_k, a 1-D search for kappa^2_k. Iterations are
optionally accelerated with the SQUAREM (S3) extrapolation in log-Theta space.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Literal

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from .classical_glm import mesh_estimate_from_stats
from .config import (
    C1,
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    INIT_MAX_ITER,
    INIT_TOL,
    KAPPA2_BOUNDS,
    KAPPA2_GRID_POINTS,
    KAPPA2_INIT,
    PHI_FLOOR,
    SIGMA2_FLOOR,
    parallel_map,
)
from .linalg import (
    AlignedSum,
    NotPositiveDefiniteError,
    SelectedInverse,
    SparseCholesky,
    SymbolicCache,
    factorize,
    hutchinson_trace,
)
from .mesh import FemOperators, Projector, TriangularMesh, assemble_fem
from .preprocess import SessionData
from .spde_prior import Hyperparameters, QtildeAssembler, qtilde_assembler

logger = logging.getLogger(__name__)

__all__ = [
    "PosteriorPrecisionError",
    "DegenerateFieldError",
    "WhiteningError",
    "SufficientStats",
    "PosteriorField",
    "EmConfig",
    "EmTrace",
    "EmResult",
    "EmWorkspace",
    "e_step",
    "mstep_sigma2",
    "mstep_phi",
    "mstep_kappa",
    "kappa_objective",
    "initial_values",
    "init_task",
    "log_marginal",
    "run_em",
    "fit_hemispheres",
]


class PosteriorPrecisionError(ArithmeticError):
    pass


class DegenerateFieldError(ArithmeticError):
    pass


class WhiteningError(ValueError):
    pass


def _embed(A: sp.spmatrix, k: int, K: int) -> sp.csc_matrix:
    """Place n x n block A at diagonal block k of an nK x nK matrix."""
    n = A.shape[0]
    coo = sp.coo_matrix(A)
    return sp.csc_matrix(
        (coo.data, (coo.row + k * n, coo.col + k * n)), shape=(n * K, n * K)
    )


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Psi'X'X Psi (nK x nK), Psi'X'y (nK), y'y and the observation count T N."""

    XtX: sp.csc_matrix
    Xty: np.ndarray
    yty: float
    TN: int
    n: int
    K: int

    @classmethod
    def from_session(cls, data: SessionData, projector: Projector | None = None) -> SufficientStats:
        projector = projector or Projector.eye(data.N)
        if projector.N != data.N:
            raise ValueError(f"projector maps to {projector.N} locations, data has {data.N}")
        n, K, Y = projector.n, data.K, data.Y

        if data.shared_design:
            X = data.X
            xtx = np.broadcast_to((X.T @ X)[None], (data.N, K, K))
            xty = Y.T @ X
        else:
            xtx = np.einsum("tnk,tnl->nkl", data.X, data.X)
            xty = np.einsum("tnk,tn->nk", data.X, Y)

        Psi = projector.Psi
        blocks: list[list[sp.spmatrix]] = [[None] * K for _ in range(K)]  # type: ignore[list-item]
        for k in range(K):
            for l in range(K):
                d = sp.diags(np.ascontiguousarray(xtx[:, k, l]))
                blocks[k][l] = d if projector.identity else Psi.T @ d @ Psi
        XtX = sp.bmat(blocks, format="csc")
        XtX.sort_indices()
        Xty = np.concatenate([Psi.T @ xty[:, k] for k in range(K)])
        return cls(
            XtX=XtX, Xty=np.asarray(Xty), yty=float(np.sum(Y * Y)), TN=data.T * data.N, n=n, K=K
        )

    @classmethod
    def from_sessions(
        cls, sessions: list[SessionData], projector: Projector | None = None
    ) -> SufficientStats:
        """Pool runs/sessions that share one Theta."""
        return cls.pool([cls.from_session(s, projector) for s in sessions])

    @classmethod
    def pool(cls, stats: list[SufficientStats], weights=None) -> SufficientStats:
        if not stats:
            raise ValueError("nothing to pool")
        weights = np.ones(len(stats)) if weights is None else np.asarray(weights, dtype=float)
        n, K = stats[0].n, stats[0].K
        for i, s in enumerate(stats):
            if (s.n, s.K) != (n, K):
                raise ValueError(f"statistics {i} have n={s.n}, K={s.K}; expected n={n}, K={K}")
        XtX = sum((w * s.XtX for w, s in zip(weights, stats)), sp.csc_matrix((n * K, n * K)))
        XtX = sp.csc_matrix(XtX)
        XtX.sort_indices()
        return cls(
            XtX=XtX,
            Xty=sum(w * s.Xty for w, s in zip(weights, stats)),
            yty=float(sum(w * s.yty for w, s in zip(weights, stats))),
            TN=int(round(sum(w * s.TN for w, s in zip(weights, stats)))),
            n=n,
            K=K,
        )


@dataclass(eq=False)
class PosteriorField:
    """N(mu, precision^-1) over the task-stacked mesh coefficients.

    `cov_trace(A)` returns Tr(A Sigma) for an nK x nK matrix A; by default it reads the
    selected inverse, which is computed on first use.
    """

    mu: np.ndarray
    precision: sp.csc_matrix
    n: int
    K: int
    factor: SparseCholesky | None = field(default=None, repr=False)
    cov_trace: Callable[[sp.spmatrix], float] | None = field(default=None, repr=False)
    _selinv: SelectedInverse | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.cov_trace is None:
            self.cov_trace = lambda A: self.selected_inverse.trace_product(A)

    @property
    def selected_inverse(self) -> SelectedInverse:
        if self._selinv is None:
            if self.factor is None:
                raise ValueError("posterior has no factorization")
            self._selinv = self.factor.selected_inverse()
        return self._selinv

    @property
    def selected_cov(self) -> sp.csc_matrix:
        """Sigma restricted to the pattern of the posterior precision."""
        return self.selected_inverse.on_pattern(self.precision)

    def task_mean(self, k: int) -> np.ndarray:
        return self.mu[k * self.n : (k + 1) * self.n]

    @property
    def mean_fields(self) -> np.ndarray:
        """(K, n)"""
        return self.mu.reshape(self.K, self.n)

    def block_trace(self, A: sp.spmatrix, k: int) -> float:
        """Tr(A Sigma_kk) + mu_k' A mu_k, i.e. Tr(A E[w_k w_k'])."""
        m = self.task_mean(k)
        return float(self.cov_trace(_embed(A, k, self.K))) + float(m @ (A @ m))

    def marginal_variance(self) -> np.ndarray:
        return self.selected_inverse.diagonal()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """(size, nK) posterior draws."""
        if self.factor is None:
            raise ValueError("posterior has no factorization")
        return (self.factor.sample(rng, size) + self.mu[:, None]).T


@dataclass(frozen=True)
class EmConfig:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    accelerate: bool = True
    tasks_parallel: bool = True
    stop_metric: Literal["absolute", "relative"] = "absolute"
    trace_method: Literal["selected", "hutchinson"] = "selected"
    probes: int = 100
    strict: bool = False
    seed: int = 0
    kappa2_bounds: tuple[float, float] = KAPPA2_BOUNDS
    kappa2_grid: int = KAPPA2_GRID_POINTS

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kappa2_bounds"] = list(self.kappa2_bounds)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EmConfig:
        data = dict(data)
        if "kappa2_bounds" in data:
            data["kappa2_bounds"] = tuple(data["kappa2_bounds"])
        return cls(**data)


@dataclass
class EmTrace:
    """One row per EM map evaluation F(Theta)."""

    rows: list[dict[str, Any]] = field(default_factory=list)

    def record(
        self, theta: Hyperparameters, *, step: str, change: float, log_post: float, seconds: float
    ) -> None:
        row: dict[str, Any] = {"iteration": len(self.rows) + 1, "step": step}
        for k in range(theta.K):
            row[f"kappa2_{k}"] = float(theta.kappa2[k])
            row[f"phi_{k}"] = float(theta.phi[k])
        row["sigma2"] = theta.sigma2
        row["change"] = change
        row["log_posterior"] = log_post
        row["seconds"] = seconds
        self.rows.append(row)

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def log_posterior(self) -> np.ndarray:
        return np.array([r["log_posterior"] for r in self.rows])

    @property
    def changes(self) -> np.ndarray:
        return np.array([r["change"] for r in self.rows])

    def ascent_path(self) -> np.ndarray:
        """Log posterior at the accepted iterates (extrapolated points excluded)."""
        return np.array([r["log_posterior"] for r in self.rows if r["step"] != "extrapolated"])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


@dataclass
class EmResult:
    theta: Hyperparameters
    posterior: PosteriorField
    trace: EmTrace
    converged: bool
    seconds: float = 0.0


class EmWorkspace:
    """Per (statistics, mesh) state reused across iterations.

    The posterior precision sum_k (c1/phi_k) Qtilde_k + XtX / sigma^2 lives on one fixed
    pattern, so every E-step after the first reuses the ordering and symbolic analysis.
    """

    def __init__(self, stats: SufficientStats, fem: FemOperators) -> None:
        if fem.n != stats.n:
            raise ValueError(f"mesh has {fem.n} vertices, statistics have n={stats.n}")
        self.stats = stats
        self.fem = fem
        self.assembler: QtildeAssembler = qtilde_assembler(fem)
        K = stats.K
        parts = []
        for k in range(K):
            parts += [_embed(fem.C, k, K), _embed(fem.G, k, K), _embed(fem.GCinvG, k, K)]
        self._precision = AlignedSum(parts + [stats.XtX])
        self.cache = SymbolicCache()

    def precision(self, theta: Hyperparameters) -> sp.csc_matrix:
        coeffs: list[float] = []
        for k2, phi in zip(theta.kappa2, theta.phi):
            s = theta.c1 / phi
            coeffs += [s * k2, 2.0 * s, s / k2]
        coeffs.append(1.0 / theta.sigma2)
        return self._precision.combine(coeffs)


def e_step(
    stats: SufficientStats,
    theta: Hyperparameters,
    fem: FemOperators,
    *,
    workspace: EmWorkspace | None = None,
    config: EmConfig | None = None,
) -> PosteriorField:
    """Posterior of w: precision Q + XtX / sigma^2, mean precision^-1 Xty / sigma^2."""
    if theta.K != stats.K:
        raise ValueError(f"theta has {theta.K} tasks, statistics have {stats.K}")
    ws = workspace or EmWorkspace(stats, fem)
    P = ws.precision(theta)
    try:
        factor = factorize(P, ws.cache)
    except NotPositiveDefiniteError as e:
        raise PosteriorPrecisionError(
            f"posterior precision is not positive definite at kappa2={theta.kappa2.tolist()}, "
            f"phi={theta.phi.tolist()}, sigma2={theta.sigma2:.6g}: {e}"
        ) from e
    mu = factor.solve(stats.Xty / theta.sigma2)
    post = PosteriorField(mu=mu, precision=P, n=stats.n, K=stats.K, factor=factor)
    if config is not None and config.trace_method == "hutchinson":
        # fresh generator per call: the same probes for every trace, and thread safe
        post.cov_trace = lambda A: hutchinson_trace(
            factor, A, config.probes, np.random.default_rng(config.seed)
        )
    return post


def mstep_sigma2(stats: SufficientStats, post: PosteriorField, strict: bool = True) -> float:
    """(y'y - 2 Xty'mu + Tr(XtX Sigma) + mu'XtX mu) / TN."""
    mu = post.mu
    assert post.cov_trace is not None
    value = (
        stats.yty - 2.0 * float(stats.Xty @ mu) + post.cov_trace(stats.XtX) + float(mu @ (stats.XtX @ mu))
    ) / stats.TN
    if value <= SIGMA2_FLOOR * max(1.0, stats.yty / stats.TN):
        if strict:
            raise DegenerateFieldError(
                f"sigma2 update is {value:.3g}: the posterior reproduces the data exactly"
            )
        logger.warning(f"sigma2 update {value:.3g} floored at {SIGMA2_FLOOR}")
        value = SIGMA2_FLOOR
    return float(value)


def mstep_phi(post: PosteriorField, fem: FemOperators, kappa2_k: float, k: int, c1: float = C1) -> float:
    """(c1 / n) Tr(Qtilde_k E[w_k w_k'])."""
    qt = qtilde_assembler(fem).qtilde(float(kappa2_k))
    tr = post.block_trace(qt, k)
    if not tr > 0:
        raise DegenerateFieldError(f"task {k}: Tr(Qtilde E[ww']) = {tr:.3g}, phi is undefined")
    return c1 * tr / fem.n


def kappa_objective(
    assembler: QtildeAssembler, traces: tuple[float, float, float], phi: float, c1: float = C1
) -> Callable[[float], float]:
    """kappa2 -> 1/2 log|Qtilde| - c1/(2 phi) Tr(Qtilde E) with Tr(C E), Tr(G E),
    Tr(G C^-1 G E) precomputed."""
    t_c, t_g, t_h = traces

    def objective(kappa2: float) -> float:
        quad = kappa2 * t_c + 2.0 * t_g + t_h / kappa2
        return 0.5 * assembler.logdet_qtilde(kappa2) - c1 / (2.0 * phi) * quad

    return objective


def _maximize_kappa(
    objective: Callable[[float], float],
    start: float | None,
    bounds: tuple[float, float],
    grid_points: int,
) -> tuple[float, bool]:
    """Log-grid bracket, bounded Brent refinement; never worse than the candidates."""
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    grid = np.linspace(lo, hi, grid_points)
    values = np.array([objective(math.exp(x)) for x in grid])
    i = int(np.argmax(values))
    best_x, best_v = grid[i], values[i]
    if start is not None and bounds[0] <= start <= bounds[1]:
        v0 = objective(start)
        if v0 > best_v:
            best_x, best_v = math.log(start), v0

    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    res = minimize_scalar(
        lambda x: -objective(math.exp(x)), bounds=(a, b), method="bounded", options={"xatol": 1e-10}
    )
    if res.success and -res.fun >= best_v:
        best_x, best_v = float(res.x), -float(res.fun)

    at_bound = abs(best_x - lo) < 1e-6 or abs(best_x - hi) < 1e-6
    return math.exp(best_x), at_bound


def mstep_kappa(
    post: PosteriorField,
    fem: FemOperators,
    phi_k: float,
    k: int,
    kappa2_start: float | None = None,
    bounds: tuple[float, float] = KAPPA2_BOUNDS,
    grid_points: int = KAPPA2_GRID_POINTS,
    c1: float = C1,
) -> float:
    """argmax over kappa2 of 1/2 log|Qtilde_k| - c1/(2 phi_k) Tr(Qtilde_k E[w_k w_k'])."""
    if not phi_k > 0:
        raise ValueError(f"phi must be positive, got {phi_k}")
    assembler = qtilde_assembler(fem)
    traces = assembler.component_traces(lambda A: post.block_trace(A, k))
    kappa2, at_bound = _maximize_kappa(
        kappa_objective(assembler, traces, phi_k, c1), kappa2_start, bounds, grid_points
    )
    if at_bound:
        logger.warning(f"task {k}: kappa2 search stopped at its bound ({kappa2:.3g})")
    return kappa2


def init_task(
    w: np.ndarray,
    fem: FemOperators,
    tol: float = INIT_TOL,
    max_iter: int = INIT_MAX_ITER,
    c1: float = C1,
    bounds: tuple[float, float] = KAPPA2_BOUNDS,
    grid_points: int = KAPPA2_GRID_POINTS,
) -> tuple[float, float, int, bool]:
    """Alternate phi = c1 w'Qtilde w / n and the kappa2 search with E = w w'.

    Returns (kappa2, phi, iterations, converged).
    """
    assembler = qtilde_assembler(fem)
    w = np.asarray(w, dtype=float)
    traces = (float(w @ (fem.C @ w)), float(w @ (fem.G @ w)), float(w @ (fem.GCinvG @ w)))
    if not any(traces):
        logger.warning(f"zero field: phi floored at {PHI_FLOOR}, kappa2 kept at {KAPPA2_INIT}")
        return KAPPA2_INIT, PHI_FLOOR, 0, False

    kappa2, phi = KAPPA2_INIT, None
    for it in range(1, max_iter + 1):
        quad = kappa2 * traces[0] + 2.0 * traces[1] + traces[2] / kappa2
        new_phi = max(c1 * quad / fem.n, PHI_FLOOR)
        new_kappa2, _ = _maximize_kappa(
            kappa_objective(assembler, traces, new_phi, c1), kappa2, bounds, grid_points
        )
        done = (
            phi is not None
            and abs(new_phi - phi) / phi < tol
            and abs(new_kappa2 - kappa2) / kappa2 < tol
        )
        kappa2, phi = new_kappa2, new_phi
        if done:
            return kappa2, phi, it, True
    logger.warning(f"initial values did not settle within {max_iter} iterations")
    return kappa2, float(phi), max_iter, False


def initial_values(
    stats: SufficientStats,
    beta_classical,
    fem: FemOperators,
    sigma2: float | None = None,
    parallel: bool = True,
) -> Hyperparameters:
    """Starting Theta from classical mesh-level estimates (one n-vector per task)."""
    beta = np.asarray(beta_classical, dtype=float).reshape(stats.K, stats.n)
    def fn(w: np.ndarray) -> tuple[float, float, int, bool]:
        return init_task(w, fem)

    results = parallel_map(fn, list(beta)) if parallel else [fn(w) for w in beta]
    for k, (k2, phi, iters, _) in enumerate(results):
        logger.debug(f"task {k}: initial kappa2={k2:.4g}, phi={phi:.4g} after {iters} iterations")
    if sigma2 is None:
        b = beta.ravel()
        sigma2 = (stats.yty - 2.0 * float(stats.Xty @ b) + float(b @ (stats.XtX @ b))) / stats.TN
        sigma2 = max(sigma2, SIGMA2_FLOOR)
    return Hyperparameters(
        kappa2=[r[0] for r in results], phi=[r[1] for r in results], sigma2=sigma2
    )


def log_marginal(
    stats: SufficientStats,
    theta: Hyperparameters,
    fem: FemOperators,
    post: PosteriorField,
) -> float:
    """log p(y | Theta); with flat hyperpriors the log posterior up to a constant.

    -TN/2 log(2 pi s2) - y'y/(2 s2) + 1/2 log|Q| - 1/2 log|P| + 1/2 b'mu, b = Xty/s2
    """
    assert post.factor is not None
    s2, n = theta.sigma2, stats.n
    assembler = qtilde_assembler(fem)
    logdet_q = sum(
        n * math.log(theta.c1 / phi) + assembler.logdet_qtilde(float(k2))
        for k2, phi in zip(theta.kappa2, theta.phi)
    )
    b = stats.Xty / s2
    return (
        -0.5 * stats.TN * math.log(2.0 * math.pi * s2)
        - stats.yty / (2.0 * s2)
        + 0.5 * logdet_q
        - 0.5 * post.factor.logdet
        + 0.5 * float(b @ post.mu)
    )


def _em_map(
    theta: Hyperparameters, ws: EmWorkspace, config: EmConfig
) -> tuple[Hyperparameters, float, PosteriorField]:
    """One EM update F(theta); also returns log p(y | theta) and the E-step posterior."""
    post = e_step(ws.stats, theta, ws.fem, workspace=ws, config=config)
    if config.trace_method == "selected":
        post.selected_inverse  # noqa: B018 - computed once before the parallel M-step
    lp = log_marginal(ws.stats, theta, ws.fem, post)
    sigma2 = mstep_sigma2(ws.stats, post, strict=config.strict)

    def task_update(k: int) -> tuple[float, float]:
        phi = mstep_phi(post, ws.fem, theta.kappa2[k], k, theta.c1)
        kappa2 = mstep_kappa(
            post,
            ws.fem,
            phi,
            k,
            kappa2_start=float(theta.kappa2[k]),
            bounds=config.kappa2_bounds,
            grid_points=config.kappa2_grid,
            c1=theta.c1,
        )
        return kappa2, phi

    tasks = range(theta.K)
    updates = parallel_map(task_update, tasks) if config.tasks_parallel else [task_update(k) for k in tasks]
    new = Hyperparameters(
        kappa2=[u[0] for u in updates], phi=[u[1] for u in updates], sigma2=sigma2, c1=theta.c1
    )
    return new, lp, post


def run_em(
    sessions: SessionData | list[SessionData],
    mesh: TriangularMesh | FemOperators,
    config: EmConfig | None = None,
    projector: Projector | None = None,
    init: Hyperparameters | None = None,
    stats: SufficientStats | None = None,
) -> EmResult:
    """Posterior mode of Theta, then the posterior of w at that mode.

    Runs/sessions in `sessions` share Theta through pooled sufficient statistics.
    """
    config = config or EmConfig()
    started = time.perf_counter()
    fem = mesh if isinstance(mesh, FemOperators) else assemble_fem(mesh)
    if stats is None:
        sessions = [sessions] if isinstance(sessions, SessionData) else list(sessions)
        raw = [i for i, s in enumerate(sessions) if not s.whitened]
        if raw:
            raise WhiteningError(
                f"sessions {raw} are not prewhitened; EM assumes V = sigma^2 I after prewhitening"
            )
        stats = SufficientStats.from_sessions(sessions, projector)
    ws = EmWorkspace(stats, fem)

    theta = init or initial_values(
        stats, mesh_estimate_from_stats(stats), fem, parallel=config.tasks_parallel
    )
    logger.info(
        f"EM start: n={stats.n}, K={stats.K}, kappa2={np.round(theta.kappa2, 4).tolist()}, "
        f"phi={np.round(theta.phi, 6).tolist()}, sigma2={theta.sigma2:.4g}"
    )

    trace = EmTrace()
    relative = config.stop_metric == "relative"
    best: tuple[float, Hyperparameters] = (-math.inf, theta)
    converged = False

    def evaluate(th: Hyperparameters, step: str) -> tuple[Hyperparameters, float, float]:
        nonlocal best
        t0 = time.perf_counter()
        new, lp, _ = _em_map(th, ws, config)
        change = new.change(th, relative=relative)
        trace.record(th, step=step, change=change, log_post=lp, seconds=time.perf_counter() - t0)
        if lp > best[0]:
            best = (lp, th)
        logger.debug(
            f"iter {trace.iterations} [{step}]: log p={lp:.6f}, change={change:.3g}, "
            f"sigma2={new.sigma2:.5g}"
        )
        return new, lp, change

    final = theta
    while trace.iterations < config.max_iter:
        theta1, _, change = evaluate(theta, "em")
        if change <= config.tol:
            final, converged = theta1, True
            break
        if not config.accelerate or trace.iterations >= config.max_iter:
            theta = theta1
            continue

        theta2, lp1, change = evaluate(theta1, "em")
        if change <= config.tol:
            final, converged = theta2, True
            break
        if trace.iterations >= config.max_iter:
            theta = theta2
            continue

        # SQUAREM S3 step in log-Theta space, stabilized by one EM map
        x0, x1, x2 = theta.to_log_vector(), theta1.to_log_vector(), theta2.to_log_vector()
        r = x1 - x0
        v = x2 - x1 - r
        norm_v = float(np.linalg.norm(v))
        if norm_v == 0.0:
            theta = theta2
            continue
        alpha = min(-float(np.linalg.norm(r)) / norm_v, -1.0)
        try:
            extrapolated = Hyperparameters.from_log_vector(x0 - 2.0 * alpha * r + alpha**2 * v)
            theta3, lp_x, change = evaluate(extrapolated, "extrapolated")
        except (ArithmeticError, ValueError) as e:
            logger.debug(f"extrapolation rejected ({e}); keeping the plain EM step")
            theta = theta2
            continue
        if lp_x < lp1:
            logger.debug(f"extrapolation lowered log p ({lp_x:.6f} < {lp1:.6f}); falling back")
            theta = theta2
            continue
        if change <= config.tol:
            final, converged = theta3, True
            break
        theta = theta3

    if not converged:
        final = best[1]
        logger.warning(
            f"EM did not converge within {config.max_iter} iterations; returning the best iterate"
        )
    posterior = e_step(stats, final, fem, workspace=ws, config=config)
    seconds = time.perf_counter() - started
    logger.info(
        f"EM {'converged' if converged else 'stopped'} after {trace.iterations} iterations "
        f"({seconds:.2f} s): kappa2={np.round(final.kappa2, 4).tolist()}, "
        f"phi={np.round(final.phi, 6).tolist()}, sigma2={final.sigma2:.5g}"
    )
    return EmResult(
        theta=final, posterior=posterior, trace=trace, converged=converged, seconds=seconds
    )


def fit_hemispheres(
    jobs: list[tuple[list[SessionData], TriangularMesh]], config: EmConfig | None = None
) -> list[EmResult]:
    """Independent meshes (e.g. left and right hemisphere) fitted in parallel."""
    return parallel_map(lambda job: run_em(job[0], job[1], config), jobs)
