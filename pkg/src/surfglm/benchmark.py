"""Replicated simulation benchmarks of the classical and EM fitters."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
import pandas as pd

from .classical_glm import fit_classical
from .em_engine import EmConfig, run_em
from .mesh import TriangularMesh
from .preprocess import SessionData, preprocess_session
from .simulator import SimConfig, SimTruth, score, simulate

logger = logging.getLogger(__name__)

__all__ = ["Condition", "parse_conditions", "prepare_sessions", "benchmark", "tolerance_sweep", "summarize"]

FITTERS = ("classical", "em")


@dataclass(frozen=True)
class Condition:
    n: int
    K: int

    @property
    def label(self) -> str:
        return f"n={self.n},K={self.K}"


def parse_conditions(ns: Sequence[int], Ks: Sequence[int]) -> list[Condition]:
    """Full grid over vertex counts and task counts."""
    return [Condition(n, K) for n in ns for K in Ks]


def prepare_sessions(
    sessions: list[SessionData], truth: SimTruth, mesh: TriangularMesh
) -> list[SessionData]:
    """Run the preprocessing pipeline on simulated runs that need it."""
    if all(s.whitened for s in sessions):
        return sessions
    cfg = truth.config
    order = max(len(cfg.ar), 1)
    out = []
    for s, stimulus in zip(sessions, truth.stimuli):
        session, _ = preprocess_session(
            s.Y, stimulus, mesh, order=order, fwhm=cfg.bump_width, scale=cfg.baseline > 0
        )
        out.append(session)
    return out


def _classical_estimate(sessions: list[SessionData]) -> np.ndarray:
    """(K, n) average of the per-run least squares estimates."""
    return np.mean([fit_classical(s).beta_hat.T for s in sessions], axis=0)


def _run_fitter(
    fitter: str, sessions: list[SessionData], mesh: TriangularMesh, em_config: EmConfig
) -> tuple[np.ndarray, float, dict[str, Any]]:
    t0 = time.perf_counter()
    if fitter == "classical":
        est = _classical_estimate(sessions)
        return est, time.perf_counter() - t0, {}
    result = run_em(sessions, mesh, em_config)
    extra = {
        "iterations": result.trace.iterations,
        "converged": result.converged,
        "sigma2": result.theta.sigma2,
    }
    return result.posterior.mean_fields, time.perf_counter() - t0, extra


def benchmark(
    conditions: Sequence[Condition],
    replicates: int,
    base: SimConfig | None = None,
    em_config: EmConfig | None = None,
    seed: int = 0,
    fitters: Sequence[str] = FITTERS,
) -> pd.DataFrame:
    """One row per condition, replicate and fitter.

    Time is measured after preprocessing. A failing replicate becomes a row with its error
    message and NaN metrics.
    """
    if replicates < 1:
        raise ValueError(f"replicates must be positive, got {replicates}")
    base = base or SimConfig()
    em_config = em_config or EmConfig()
    seeds = np.random.SeedSequence(seed).generate_state(len(conditions) * replicates)
    rows: list[dict[str, Any]] = []
    for ci, cond in enumerate(conditions):
        for rep in range(replicates):
            rep_seed = int(seeds[ci * replicates + rep])
            try:
                cfg = replace(base, n_vertices=cond.n, K=cond.K, seed=rep_seed)
                sessions, truth, mesh = simulate(cfg)
                sessions = prepare_sessions(sessions, truth, mesh)
            except Exception as e:
                logger.warning(f"{cond.label} replicate {rep}: simulation failed: {e}")
                rows += [
                    {"condition": cond.label, "n": cond.n, "K": cond.K, "replicate": rep,
                     "fitter": f, "seconds": np.nan, "rmse": np.nan, "error": str(e)}
                    for f in fitters
                ]  # fmt: skip
                continue
            for fitter in fitters:
                row: dict[str, Any] = {
                    "condition": cond.label,
                    "n": mesh.n,
                    "K": cond.K,
                    "replicate": rep,
                    "fitter": fitter,
                    "seed": rep_seed,
                }
                try:
                    est, seconds, extra = _run_fitter(fitter, sessions, mesh, em_config)
                    row.update(seconds=seconds, rmse=score(est, truth).rmse, error=None, **extra)
                except Exception as e:
                    logger.warning(f"{cond.label} replicate {rep} ({fitter}) failed: {e}")
                    row.update(seconds=np.nan, rmse=np.nan, error=str(e))
                rows.append(row)
            logger.info(
                f"{cond.label} replicate {rep + 1}/{replicates}: "
                + ", ".join(f"{r['fitter']} rmse={r['rmse']:.4f}" for r in rows[-len(fitters):])
            )
    return pd.DataFrame(rows)


def tolerance_sweep(
    tolerances: Sequence[float],
    datasets: int,
    base: SimConfig | None = None,
    em_config: EmConfig | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """EM time and RMSE at several stopping tolerances on the same simulated datasets."""
    base = base or SimConfig()
    em_config = em_config or EmConfig()
    seeds = np.random.SeedSequence(seed).generate_state(datasets)
    rows: list[dict[str, Any]] = []
    for d in range(datasets):
        sessions, truth, mesh = simulate(replace(base, seed=int(seeds[d])))
        sessions = prepare_sessions(sessions, truth, mesh)
        for tol in tolerances:
            cfg = replace(em_config, tol=float(tol))
            try:
                est, seconds, extra = _run_fitter("em", sessions, mesh, cfg)
                rows.append(
                    {"dataset": d, "tol": float(tol), "seconds": seconds,
                     "rmse": score(est, truth).rmse, "error": None, **extra}
                )  # fmt: skip
            except Exception as e:
                logger.warning(f"dataset {d} at tol={tol} failed: {e}")
                rows.append(
                    {"dataset": d, "tol": float(tol), "seconds": np.nan, "rmse": np.nan, "error": str(e)}
                )
        logger.info(f"tolerance sweep: dataset {d + 1}/{datasets} done")
    return pd.DataFrame(rows)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and sd of time and RMSE per condition and fitter, with failure counts."""
    grouped = frame.groupby(["condition", "fitter"], sort=False)
    table = grouped[["seconds", "rmse"]].agg(["mean", "std"])
    table.columns = [f"{a}_{b}" for a, b in table.columns]
    table["failures"] = grouped["error"].apply(lambda e: int(e.notna().sum()))
    return table.reset_index()
