"""PNG figures: field heatmaps, activation maps and benchmark summaries.

Figures are built on `matplotlib.figure.Figure` directly, so nothing depends on the
interactive backend, and saved without a Software tag so equal inputs give equal bytes.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np
import pandas as pd
from matplotlib.colors import TwoSlopeNorm
from matplotlib.figure import Figure
from matplotlib.patches import Patch
from matplotlib.tri import Triangulation

from .config import GAMMA_COLORS, INACTIVE_COLOR
from .mesh import TriangularMesh

logger = logging.getLogger(__name__)

__all__ = ["heatmap", "activation_map", "time_bars", "rmse_boxes", "tolerance_plot"]

DPI = 100
PNG_METADATA = {"Software": None}


def _save(fig: Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=DPI, metadata=PNG_METADATA)
    logger.debug(f"saved {path}")
    return path


def _triangulation(mesh: TriangularMesh) -> Triangulation:
    """Planar meshes as they are; closed surfaces unrolled to longitude/latitude."""
    if mesh.dim == 2:
        return Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    r = np.linalg.norm(v, axis=1)
    lon = np.arctan2(v[:, 1], v[:, 0])
    lat = np.arcsin(np.clip(v[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    tri = Triangulation(lon, lat, mesh.triangles)
    span = np.ptp(lon[mesh.triangles], axis=1)
    tri.set_mask(span > np.pi)  # faces crossing the date line
    return tri


def _face_values(tri: Triangulation, values: np.ndarray) -> np.ndarray:
    return values[tri.triangles].mean(axis=1)


def heatmap(
    mesh: TriangularMesh,
    values: np.ndarray,
    path: Path,
    title: str = "",
    vmax: float | None = None,
) -> Path:
    """Diverging heatmap of one per-vertex field, centered at zero."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n,):
        raise ValueError(f"need one value per vertex ({mesh.n}), got {values.shape}")
    vmax = vmax if vmax is not None else float(np.abs(values).max())
    vmax = vmax if vmax > 0 else 1.0
    tri = _triangulation(mesh)
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    pc = ax.tripcolor(
        tri,
        facecolors=_face_values(tri, values),
        cmap="RdBu_r",
        norm=TwoSlopeNorm(vcenter=0.0, vmin=-vmax, vmax=vmax),
    )
    fig.colorbar(pc, ax=ax)
    ax.set_aspect("equal")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def activation_map(
    mesh: TriangularMesh,
    sets: Mapping[float, np.ndarray],
    path: Path,
    title: str = "",
) -> Path:
    """Vertices colored by the highest threshold whose set contains them.

    `sets` maps each threshold to a boolean per-vertex mask; at most three thresholds,
    drawn lowest first.
    """
    gammas = sorted(sets)
    if len(gammas) > len(GAMMA_COLORS):
        raise ValueError(f"at most {len(GAMMA_COLORS)} thresholds can be drawn, got {len(gammas)}")
    tri = _triangulation(mesh)
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    ax.triplot(tri, color=INACTIVE_COLOR, linewidth=0.3)
    if mesh.dim == 2:
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    else:
        x, y = tri.x, tri.y
    for gamma, color in zip(gammas, GAMMA_COLORS):
        mask = np.asarray(sets[gamma], dtype=bool)
        if mask.shape != (mesh.n,):
            raise ValueError(f"activation mask for gamma={gamma} has shape {mask.shape}")
        if mask.any():
            ax.scatter(x[mask], y[mask], s=6, c=color, linewidths=0)
    handles = [
        Patch(facecolor=color, label=f"> {gamma:g}") for gamma, color in zip(gammas, GAMMA_COLORS)
    ]
    ax.legend(handles=handles, loc="upper right", fontsize=8, frameon=False)
    ax.set_aspect("equal")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def time_bars(frame: pd.DataFrame, path: Path) -> Path:
    """Mean wall time per condition, one bar per fitter."""
    table = frame.groupby(["condition", "fitter"])["seconds"].mean().unstack("fitter")
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    table.plot.bar(ax=ax, rot=0)
    ax.set_ylabel("time after preprocessing (s)")
    ax.set_xlabel("")
    return _save(fig, path)


def rmse_boxes(frame: pd.DataFrame, path: Path) -> Path:
    """RMSE distribution per condition and fitter."""
    ok = frame.dropna(subset=["rmse"])
    groups = list(ok.groupby(["condition", "fitter"])["rmse"])
    fig = Figure(figsize=(max(6, len(groups) * 0.8), 4))
    ax = fig.subplots()
    if groups:
        ax.boxplot([g.to_numpy() for _, g in groups])
        ax.set_xticks(range(1, len(groups) + 1))
        ax.set_xticklabels([f"{c}\n{f}" for (c, f), _ in groups], fontsize=7)
    ax.set_ylabel("RMSE")
    return _save(fig, path)


def tolerance_plot(frame: pd.DataFrame, path: Path, tolerances: Sequence[float] | None = None) -> Path:
    """Mean time and RMSE against the stopping tolerance."""
    table = frame.groupby("tol")[["seconds", "rmse"]].mean().sort_index(ascending=False)
    if tolerances is not None:
        table = table.loc[[t for t in tolerances if t in table.index]]
    fig = Figure(figsize=(8, 3.5))
    ax_t, ax_r = fig.subplots(1, 2)
    labels = [f"{t:g}" for t in table.index]
    ax_t.plot(labels, table["seconds"], marker="o")
    ax_t.set_xlabel("tolerance")
    ax_t.set_ylabel("time (s)")
    ax_r.plot(labels, table["rmse"], marker="o")
    ax_r.set_xlabel("tolerance")
    ax_r.set_ylabel("RMSE")
    fig.tight_layout()
    return _save(fig, path)
