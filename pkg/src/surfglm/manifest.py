"""Run manifests: what a CLI stage read, how it was configured and what it produced."""

from __future__ import annotations

import json
import platform
import time
from collections.abc import Iterator
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import psutil
import scipy

from . import __version__
from .artifacts import atomic_write_json, file_sha256

MANIFEST_NAME = "manifest.json"


class RunManifest:
    """One per output directory; a rerun overwrites it."""

    def __init__(self, *, command: str, config: dict[str, Any] | None = None):
        self.data: dict[str, Any] = {
            "manifest_version": "1.0",
            "created_at": datetime.now(timezone.utc).isoformat(),
            "command": command,
            "config": config or {},
            "versions": {
                "surfglm": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "seeds": {},
            "inputs": {},
            "outputs": {},
            "stages": [],
        }

    def set_config(self, config: dict[str, Any]) -> None:
        self.data["config"] = config

    def add_seed(self, name: str, seed: int) -> None:
        self.data["seeds"][name] = int(seed)

    def add_input(self, path: Path, name: str | None = None) -> None:
        """Record an input file and its SHA-256."""
        path = Path(path)
        self.data["inputs"][name or path.name] = {"path": str(path), "sha256": file_sha256(path)}

    def add_outputs(self, paths: list[Path], root: Path | None = None) -> None:
        for p in paths:
            p = Path(p)
            key = str(p.relative_to(root)) if root is not None else p.name
            self.data["outputs"][key] = file_sha256(p)

    def record_stage(self, name: str, seconds: float) -> None:
        rss = psutil.Process().memory_info().rss
        self.data["stages"].append(
            {"name": name, "seconds": round(seconds, 6), "rss_mb": round(rss / 2**20, 1)}
        )

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a block and record it, together with resident memory, as a stage."""
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record_stage(name, time.perf_counter() - t0)

    def stage_seconds(self, name: str) -> float:
        return float(sum(s["seconds"] for s in self.data["stages"] if s["name"] == name))

    def to_dict(self) -> dict[str, Any]:
        return self.data

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        atomic_write_json(path, self.data)
        return path

    @classmethod
    def load(cls, path: Path) -> RunManifest:
        """Load from a manifest file or from the directory holding it."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        instance = cls.__new__(cls)
        instance.data = json.loads(path.read_text(encoding="utf-8"))
        return instance
