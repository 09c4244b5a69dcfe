"""Reading and writing the text artifacts exchanged between CLI stages.

Every write goes to a temp file next to the target and is moved over it with os.replace
while holding `<file>.lock`.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import scipy.sparse as sp
from filelock import FileLock

from .em_engine import EmResult, PosteriorField, SufficientStats
from .linalg import factorize
from .mesh import TriangularMesh
from .spde_prior import Hyperparameters

logger = logging.getLogger(__name__)

__all__ = [
    "ArtifactError",
    "FitBundle",
    "atomic_write_text",
    "atomic_write_json",
    "file_sha256",
    "write_mesh",
    "read_mesh",
    "write_triplets",
    "read_triplets",
    "write_response",
    "read_response",
    "write_design",
    "read_design",
    "write_theta",
    "read_theta",
    "write_fit_dir",
    "read_fit_dir",
    "require_files",
]

LOCK_TIMEOUT = 60


class ArtifactError(ValueError):
    pass


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock", timeout=LOCK_TIMEOUT):
        fd, tmp = tempfile.mkstemp(prefix=path.name, dir=str(path.parent))
        tmp_path = Path(tmp)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
                f.flush()
                os.fsync(f.fileno())
            os.replace(str(tmp_path), str(path))
        finally:
            if tmp_path.exists():
                tmp_path.unlink()
    logger.debug(f"wrote {path}")


def atomic_write_json(path: Path, data: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def require_files(paths: list[Path]) -> None:
    """Raise listing every missing input at once."""
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing input files: " + ", ".join(missing))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_mesh(path: Path, mesh: TriangularMesh) -> None:
    """First line `n m`, then n lines `x y z`, then m lines `i j k` (0-based)."""
    v = mesh.vertices if mesh.dim == 3 else np.column_stack([mesh.vertices, np.zeros(mesh.n)])
    lines = [f"{mesh.n} {len(mesh.triangles)}"]
    lines += [" ".join(_fmt(c) for c in row) for row in v]
    lines += [" ".join(str(int(i)) for i in tri) for tri in mesh.triangles]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_mesh(path: Path, check_connected: bool = True) -> TriangularMesh:
    """Meshes whose z coordinates are all zero come back planar."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ArtifactError(f"{path}: first line must be 'n m'")
        n, m = int(header[0]), int(header[1])
        body = np.loadtxt(f, ndmin=2) if n + m else np.empty((0, 3))
    if body.shape != (n + m, 3):
        raise ArtifactError(f"{path}: expected {n + m} rows of 3 values, got {body.shape}")
    vertices, triangles = body[:n], body[n:].astype(np.int64)
    if n and np.all(vertices[:, 2] == 0):
        vertices = vertices[:, :2]
    return TriangularMesh(vertices, triangles, check_connected=check_connected)


def write_triplets(path: Path, A: sp.spmatrix) -> None:
    """Header `# rows cols nnz`, then `row col value` per stored entry."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.row, coo.col))
    buf = io.StringIO()
    buf.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        buf.write(f"{int(r)} {int(c)} {_fmt(v)}\n")
    atomic_write_text(path, buf.getvalue())


def read_triplets(path: Path) -> sp.csc_matrix:
    with open(path, encoding="utf-8") as f:
        header = f.readline().lstrip("#").split()
        if len(header) != 3:
            raise ArtifactError(f"{path}: first line must be '# rows cols nnz'")
        rows, cols, nnz = (int(x) for x in header)
        body = np.loadtxt(f, ndmin=2) if nnz else np.empty((0, 3))
    if body.shape[0] != nnz:
        raise ArtifactError(f"{path}: header promises {nnz} entries, found {body.shape[0]}")
    A = sp.csc_matrix(
        (body[:, 2], (body[:, 0].astype(np.int64), body[:, 1].astype(np.int64))), shape=(rows, cols)
    )
    A.sort_indices()
    return A


def _write_frame(path: Path, frame: pd.DataFrame) -> None:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def write_response(path: Path, Y: np.ndarray) -> None:
    """(T, N), one column `v<i>` per location."""
    Y = np.atleast_2d(Y)
    _write_frame(path, pd.DataFrame(Y, columns=[f"v{i}" for i in range(Y.shape[1])]))


def read_response(path: Path) -> np.ndarray:
    return pd.read_csv(path).to_numpy(dtype=float)


def write_design(path: Path, X: np.ndarray, task_names: list[str] | None = None) -> None:
    """Shared (T, K) design as one column per task; per-location (T, N, K) as `<task>|<loc>`."""
    X = np.asarray(X, dtype=float)
    K = X.shape[-1]
    names = task_names or [f"task{k}" for k in range(K)]
    if X.ndim == 2:
        frame = pd.DataFrame(X, columns=names)
    else:
        T, N, _ = X.shape
        cols = [f"{names[k]}|{v}" for k in range(K) for v in range(N)]
        frame = pd.DataFrame(np.moveaxis(X, 2, 1).reshape(T, K * N), columns=cols)
    _write_frame(path, frame)


def read_design(path: Path) -> tuple[np.ndarray, list[str]]:
    frame = pd.read_csv(path)
    cols = list(frame.columns)
    if not any("|" in c for c in cols):
        return frame.to_numpy(dtype=float), cols
    names = list(dict.fromkeys(c.rsplit("|", 1)[0] for c in cols))
    K = len(names)
    if len(cols) % K:
        raise ArtifactError(f"{path}: {len(cols)} columns do not split into {K} tasks")
    N = len(cols) // K
    T = len(frame)
    X = np.moveaxis(frame.to_numpy(dtype=float).reshape(T, K, N), 1, 2)
    return X, names


def write_theta(path: Path, theta: Hyperparameters) -> None:
    atomic_write_json(path, theta.to_dict())


def read_theta(path: Path) -> Hyperparameters:
    return Hyperparameters.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(eq=False)
class FitBundle:
    """Everything excursions and group analysis need from an EM fit directory."""

    theta: Hyperparameters
    mean: np.ndarray  # (K, n)
    precision: sp.csc_matrix
    stats: SufficientStats
    mesh: TriangularMesh
    task_names: list[str]

    def posterior(self) -> PosteriorField:
        return PosteriorField(
            mu=self.mean.ravel(),
            precision=self.precision,
            n=self.stats.n,
            K=self.stats.K,
            factor=factorize(self.precision),
        )


FIT_FILES = (
    "theta.json",
    "posterior_mean.csv",
    "trace.csv",
    "precision.triplets",
    "xtx.triplets",
    "xty.csv",
    "stats.json",
    "mesh.txt",
)


def write_fit_dir(
    out: Path,
    result: EmResult,
    stats: SufficientStats,
    mesh: TriangularMesh,
    task_names: list[str] | None = None,
) -> list[Path]:
    out = Path(out)
    names = task_names or [f"task{k}" for k in range(stats.K)]
    post = result.posterior
    write_theta(out / "theta.json", result.theta)
    _write_frame(
        out / "posterior_mean.csv",
        pd.DataFrame(post.mean_fields.T, columns=names),
    )
    _write_frame(out / "trace.csv", result.trace.to_frame())
    write_triplets(out / "precision.triplets", post.precision)
    write_triplets(out / "xtx.triplets", stats.XtX)
    _write_frame(out / "xty.csv", pd.DataFrame({"xty": stats.Xty}))
    atomic_write_json(
        out / "stats.json",
        {
            "yty": stats.yty,
            "TN": stats.TN,
            "n": stats.n,
            "K": stats.K,
            "task_names": names,
            "converged": result.converged,
            "seconds": result.seconds,
        },
    )
    write_mesh(out / "mesh.txt", mesh)
    logger.info(f"wrote EM fit to {out}")
    return [out / f for f in FIT_FILES]


def read_fit_dir(path: Path) -> FitBundle:
    path = Path(path)
    require_files([path / f for f in FIT_FILES])
    meta = json.loads((path / "stats.json").read_text(encoding="utf-8"))
    n, K = int(meta["n"]), int(meta["K"])
    mean = pd.read_csv(path / "posterior_mean.csv").to_numpy(dtype=float).T
    if mean.shape != (K, n):
        raise ArtifactError(f"{path}: posterior mean has shape {mean.shape}, expected {(K, n)}")
    stats = SufficientStats(
        XtX=read_triplets(path / "xtx.triplets"),
        Xty=pd.read_csv(path / "xty.csv")["xty"].to_numpy(dtype=float),
        yty=float(meta["yty"]),
        TN=int(meta["TN"]),
        n=n,
        K=K,
    )
    return FitBundle(
        theta=read_theta(path / "theta.json"),
        mean=mean,
        precision=read_triplets(path / "precision.triplets"),
        stats=stats,
        mesh=read_mesh(path / "mesh.txt", check_connected=False),
        task_names=list(meta.get("task_names") or [f"task{k}" for k in range(K)]),
    )
