"""Synthetic surface fMRI with known coefficient fields.

Coefficient fields are truncated Gaussian bumps on the mesh (or prior draws), the design is
a randomized block design convolved with the HRF, and the noise is AR. Subjects, sessions
and runs perturb the group field with smooth nested variation inside the active support.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from scipy.signal import lfilter

from .config import DEFAULT_TR, parallel_map
from .mesh import TriangularMesh, assemble_fem, flat_grid, icosphere
from .preprocess import HrfParams, SessionData, convolve_and_scale, is_stationary, smooth_on_mesh
from .spde_prior import Hyperparameters, sample_prior_field

logger = logging.getLogger(__name__)

__all__ = [
    "SimulationError",
    "SimConfig",
    "SimTruth",
    "SimScore",
    "bump_radius",
    "build_mesh",
    "block_design",
    "ar_noise",
    "simulate",
    "score",
]

# bumps are cut where they fall below this fraction of their peak
BUMP_CUTOFF = 0.02


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mesh: Literal["grid", "icosphere"] = "grid"
    n_vertices: int = 2000
    extent: float = 100.0  # grid side or sphere radius, mm
    K: int = 2
    T: int = 300
    TR: float = DEFAULT_TR
    amplitude: float = 2.0
    error_var: float = 1.0
    ar: tuple[float, ...] = ()
    block_len: int = 15  # in TRs
    subjects: int = 1
    sessions: int = 1
    runs: int = 1
    subject_var: float = 0.0
    session_var: float = 0.0
    run_var: float = 0.0
    bump_width: float = 5.0  # Gaussian sd, mm
    bumps_per_task: int = 2
    mode: Literal["bumps", "prior"] = "bumps"
    prior_kappa2: float = 0.05
    prior_phi: float = 0.05
    baseline: float = 0.0  # > 0 emits raw BOLD around this mean instead of percent change
    seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "n_vertices": self.n_vertices,
            "K": self.K,
            "T": self.T,
            "block_len": self.block_len,
            "subjects": self.subjects,
            "sessions": self.sessions,
            "runs": self.runs,
            "bumps_per_task": self.bumps_per_task,
        }
        bad = [k for k, v in counts.items() if v < 1]
        if bad:
            raise SimulationError(f"counts must be positive: {', '.join(bad)}")
        if not self.amplitude > 0:
            raise SimulationError(f"amplitude must be > 0, got {self.amplitude}")
        if self.error_var < 0 or min(self.subject_var, self.session_var, self.run_var) < 0:
            raise SimulationError("variances must be nonnegative")
        if not (self.bump_width > 0 and self.extent > 0 and self.TR > 0):
            raise SimulationError("bump_width, extent and TR must be positive")
        if self.mode not in ("bumps", "prior"):
            raise SimulationError(f"unknown mode '{self.mode}'")
        if self.mesh not in ("grid", "icosphere"):
            raise SimulationError(f"unknown mesh '{self.mesh}'")
        if self.baseline < 0:
            raise SimulationError("baseline must be nonnegative")
        if self.ar and not is_stationary(np.asarray(self.ar)).all():
            raise SimulationError(f"AR coefficients {list(self.ar)} are not stationary")

    @property
    def whitened(self) -> bool:
        """Data need no prewhitening when the noise is white and already percent change."""
        return not self.ar and self.baseline == 0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["ar"] = list(self.ar)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SimConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise SimulationError(f"unknown simulation settings: {', '.join(unknown)}")
        data = dict(data)
        if "ar" in data:
            data["ar"] = tuple(float(a) for a in data["ar"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: Path) -> SimConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(eq=False)
class SimTruth:
    beta: np.ndarray  # (K, n) group field
    fields: np.ndarray  # (subjects, sessions, runs, K, n)
    masks: np.ndarray  # (K, n) bool
    stimuli: list[np.ndarray]  # (T, K) per run, same order as the sessions
    labels: list[tuple[int, int, int]]  # (subject, session, run) per run
    theta: Hyperparameters | None = None  # generating hyperparameters in prior mode
    config: SimConfig = field(default_factory=SimConfig)

    def field_of(self, run: int) -> np.ndarray:
        s, e, r = self.labels[run]
        return self.fields[s, e, r]

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "beta": self.beta.tolist(),
            "masks": self.masks.astype(int).tolist(),
            "labels": [list(lbl) for lbl in self.labels],
            "theta": None if self.theta is None else self.theta.to_dict(),
        }


@dataclass
class SimScore:
    rmse: float
    tpr: float | None = None
    fpr: float | None = None
    seconds: float | None = None

    def to_dict(self) -> dict[str, float | None]:
        return asdict(self)


def bump_radius(width: float) -> float:
    """Radius at which a Gaussian bump of sd `width` drops to the cutoff."""
    return width * math.sqrt(-2.0 * math.log(BUMP_CUTOFF))


def build_mesh(config: SimConfig) -> TriangularMesh:
    if config.mesh == "grid":
        side = max(2, int(round(math.sqrt(config.n_vertices))))
        return flat_grid(side, side, width=config.extent)
    subdivisions = min(range(8), key=lambda s: abs(10 * 4**s + 2 - config.n_vertices))
    return icosphere(subdivisions, radius=config.extent)


def block_design(T: int, K: int, block_len: int, rng: np.random.Generator) -> np.ndarray:
    """(T, K) 0/1 stimulus: blocks of rest and of each task in random order."""
    n_blocks = math.ceil(T / block_len)
    if n_blocks < K + 1:
        raise SimulationError(f"T={T} fits {n_blocks} blocks, need at least {K + 1} for {K} tasks")
    labels = np.resize(np.arange(-1, K), n_blocks)
    labels = rng.permutation(labels)
    per_t = np.repeat(labels, block_len)[:T]
    return (per_t[:, None] == np.arange(K)[None, :]).astype(float)


def ar_noise(
    ar: tuple[float, ...] | np.ndarray, var: float, T: int, N: int, rng: np.random.Generator
) -> np.ndarray:
    """(T, N) AR series with innovation variance `var`, started from a long burn-in."""
    a = np.asarray(ar, dtype=float)
    burn = 100 * len(a)
    e = rng.standard_normal((T + burn, N)) * math.sqrt(var)
    if not len(a):
        return e
    return lfilter([1.0], np.concatenate([[1.0], -a]), e, axis=0)[burn:]


def _bump_fields(
    mesh: TriangularMesh, config: SimConfig, rng: np.random.Generator
) -> np.ndarray:
    coords = mesh.vertices
    r0 = bump_radius(config.bump_width)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    planar = mesh.dim == 2
    out = np.zeros((config.K, mesh.n))
    for k in range(config.K):
        centers: list[np.ndarray] = []
        for _ in range(1000):
            if len(centers) == config.bumps_per_task:
                break
            if planar:
                if np.any(hi - lo <= 2 * r0):
                    break
                c = lo + r0 + rng.random(2) * (hi - lo - 2 * r0)
            else:
                c = coords[rng.integers(mesh.n)]
            if all(np.linalg.norm(c - o) >= 2 * r0 for o in centers):
                centers.append(c)
        if len(centers) < config.bumps_per_task:
            raise SimulationError(
                f"mesh too small for {config.bumps_per_task} bumps of radius {r0:.1f} mm "
                f"per task (placed {len(centers)})"
            )
        for c in centers:
            d = np.linalg.norm(coords - c, axis=1)
            inside = d <= r0
            if inside.sum() < 3:
                raise SimulationError(
                    f"bump of radius {r0:.1f} mm covers {int(inside.sum())} vertices; "
                    "refine the mesh or widen the bumps"
                )
            out[k, inside] += config.amplitude * np.exp(-(d[inside] ** 2) / (2 * config.bump_width**2))
    return out


def _smooth_noise(
    mesh: TriangularMesh, K: int, width: float, rng: np.random.Generator
) -> np.ndarray:
    """(K, n) smooth field with unit average variance."""
    raw = rng.standard_normal((mesh.n, K))
    fwhm = width * 2.0 * math.sqrt(2.0 * math.log(2.0))
    g = smooth_on_mesh(raw, mesh, fwhm).T
    sd = g.std()
    return g / sd if sd > 0 else g


def simulate(config: SimConfig) -> tuple[list[SessionData], SimTruth, TriangularMesh]:
    """Sessions ordered by subject, session, run."""
    mesh = build_mesh(config)
    root = np.random.SeedSequence(config.seed)
    group_ss, *subject_ss = root.spawn(config.subjects + 1)
    group_rng = np.random.default_rng(group_ss)

    theta = None
    if config.mode == "bumps":
        beta = _bump_fields(mesh, config, group_rng)
        masks = beta != 0
    else:
        theta = Hyperparameters(
            kappa2=np.full(config.K, config.prior_kappa2),
            phi=np.full(config.K, config.prior_phi),
            sigma2=max(config.error_var, 1e-12),
        )
        beta = sample_prior_field(theta, assemble_fem(mesh), group_rng, 1)[0]
        masks = np.ones_like(beta, dtype=bool)
    logger.info(
        f"simulated {config.mode} fields on {mesh.n} vertices: "
        f"active={masks.sum(axis=1).tolist()}, nonzero mean="
        f"{np.round([beta[k][masks[k]].mean() for k in range(config.K)], 3).tolist()}"
    )

    hrf = HrfParams(TR=config.TR)
    nested = (
        (config.subject_var, config.session_var, config.run_var)
        if config.mode == "bumps"
        else (0.0, 0.0, 0.0)
    )

    def one_subject(job: tuple[int, np.random.SeedSequence]):
        s, ss = job
        rng = np.random.default_rng(ss)
        fields = np.empty((config.sessions, config.runs, config.K, mesh.n))
        runs: list[tuple[SessionData, np.ndarray, tuple[int, int, int]]] = []
        subj = beta.copy()
        if nested[0] > 0:
            subj += math.sqrt(nested[0]) * _smooth_noise(mesh, config.K, config.bump_width, rng) * masks
        for e in range(config.sessions):
            sess = subj.copy()
            if nested[1] > 0:
                sess += math.sqrt(nested[1]) * _smooth_noise(mesh, config.K, config.bump_width, rng) * masks
            for r in range(config.runs):
                run = sess.copy()
                if nested[2] > 0:
                    run += math.sqrt(nested[2]) * _smooth_noise(mesh, config.K, config.bump_width, rng) * masks
                fields[e, r] = run
                stimulus = block_design(config.T, config.K, config.block_len, rng)
                X = convolve_and_scale(stimulus, hrf)
                Y = X @ run + ar_noise(config.ar, config.error_var, config.T, mesh.n, rng)
                if config.baseline > 0:
                    Y = config.baseline * (1.0 + Y / 100.0)
                session = SessionData(Y=Y, X=X, TR=config.TR, whitened=config.whitened)
                runs.append((session, stimulus, (s, e, r)))
        return fields, runs

    per_subject = parallel_map(one_subject, list(enumerate(subject_ss)))
    sessions: list[SessionData] = []
    stimuli: list[np.ndarray] = []
    labels: list[tuple[int, int, int]] = []
    for _, runs in per_subject:
        for session, stimulus, label in runs:
            sessions.append(session)
            stimuli.append(stimulus)
            labels.append(label)
    truth = SimTruth(
        beta=beta,
        fields=np.stack([f for f, _ in per_subject]),
        masks=masks,
        stimuli=stimuli,
        labels=labels,
        theta=theta,
        config=config,
    )
    return sessions, truth, mesh


def score(
    estimate: np.ndarray,
    truth: SimTruth | np.ndarray,
    active: np.ndarray | None = None,
    seconds: float | None = None,
) -> SimScore:
    """RMSE of a (K, n) estimate against the truth, plus detection rates when `active` is given.

    A bare array truth counts every nonzero entry as truly active.
    """
    target = truth.beta if isinstance(truth, SimTruth) else np.asarray(truth, dtype=float)
    mask = truth.masks if isinstance(truth, SimTruth) else target != 0
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != target.shape:
        raise SimulationError(f"estimate has shape {estimate.shape}, truth has {target.shape}")
    rmse = float(np.sqrt(np.mean((estimate - target) ** 2)))
    tpr = fpr = None
    if active is not None:
        active = np.asarray(active, dtype=bool)
        if active.shape != mask.shape:
            raise SimulationError(f"activation map has shape {active.shape}, truth has {mask.shape}")
        tpr = float(active[mask].mean()) if mask.any() else float("nan")
        fpr = float(active[~mask].mean()) if (~mask).any() else float("nan")
    return SimScore(rmse=rmse, tpr=tpr, fpr=fpr, seconds=seconds)
