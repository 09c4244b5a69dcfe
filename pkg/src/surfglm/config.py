# CONFIG.py setup.
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, NewType, TypeVar

from platformdirs import user_data_dir

# Directory configuration with environment variable overrides
# Fall back to platformdirs if env vars are not set
DATA_DIR = Path(
    os.environ.get("SURFGLM_DATA") or user_data_dir("surfglm", "surfglm")
)  # default root for CLI outputs

Mm = NewType("Mm", float)
Seconds = NewType("Seconds", float)

# c1 in phi = c1 / (kappa^2 tau^2)
C1 = 1.0 / (4.0 * math.pi)

DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 100
DEFAULT_AR_ORDER = 6
DEFAULT_FWHM_MM = Mm(6.0)
DEFAULT_TR = Seconds(1.0)

KAPPA2_INIT = 4.0
KAPPA2_BOUNDS = (1e-4, 1e4)
KAPPA2_GRID_POINTS = 25
INIT_TOL = 1e-3
INIT_MAX_ITER = 100

SIGMA2_FLOOR = 1e-10
PHI_FLOOR = 1e-8
AR_SHRINK_FACTOR = 0.99

DEFAULT_GAMMAS = (0.0, 0.5, 1.0)
DEFAULT_ALPHA = 0.01
DEFAULT_SAMPLES = 10_000
MIN_SAMPLES = 1000
SAMPLE_CHUNK = 500
MIN_GROUP_DRAWS = 100

# activation map colors, lowest threshold first
GAMMA_COLORS = ("#FFD27F", "#FF0000", "#A020F0")
INACTIVE_COLOR = "#D9D9D9"

# how far (mm) a data location may sit from the surface
PROJECTION_TOL_MM = Mm(0.5)

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Worker count for every pool, SURFGLM_THREADS wins over cpu_count."""
    raw = os.environ.get("SURFGLM_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map over a thread pool, results in input order."""
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
