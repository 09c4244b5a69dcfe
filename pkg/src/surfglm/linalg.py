"""Sparse symmetric factorizations: SuperLU in symmetric mode read back as LDL'.

The factor is used for log-determinants, solves, Gaussian sampling from a precision
matrix and the Takahashi selected inverse on the closed factor pattern.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

__all__ = [
    "NotPositiveDefiniteError",
    "SymbolicCache",
    "SparseCholesky",
    "SelectedInverse",
    "AlignedSum",
    "factorize",
    "hutchinson_trace",
    "pattern_key",
]

_SPLU_OPTIONS = {"SymmetricMode": True}


class NotPositiveDefiniteError(ArithmeticError):
    pass


def pattern_key(A: sp.csc_matrix) -> str:
    h = hashlib.sha1()
    h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(A.indptr, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(A.indices, dtype=np.int64).tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class _Symbolic:
    """Closed pattern of the strictly lower factor, CSC, in factor coordinates."""

    indptr: np.ndarray
    indices: np.ndarray
    keys: np.ndarray  # col * n + row, sorted because CSC is column-major with sorted rows

    @property
    def nnz(self) -> int:
        return len(self.indices)


def _symbolic_analysis(B: sp.csc_matrix) -> _Symbolic:
    """Row structure of every column of chol(B) via the elimination tree.

    struct(j) = {i > j : B_ij != 0} united with struct(c) minus {j} for each etree
    child c of j; the parent of j is min struct(j).
    """
    n = B.shape[0]
    lower = sp.tril(B, k=-1, format="csc")
    lower.sort_indices()
    children: list[list[int]] = [[] for _ in range(n)]
    structs: list[np.ndarray] = []
    for j in range(n):
        own = lower.indices[lower.indptr[j] : lower.indptr[j + 1]].astype(np.int64)
        if children[j]:
            parts = [own] + [structs[c][1:] for c in children[j]]
            s = np.unique(np.concatenate(parts))
        else:
            s = own
        structs.append(s)
        if s.size:
            children[int(s[0])].append(j)
    counts = np.array([s.size for s in structs], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(structs) if n else np.empty(0, dtype=np.int64)
    cols = np.repeat(np.arange(n, dtype=np.int64), counts)
    return _Symbolic(indptr=indptr, indices=indices, keys=cols * n + indices)


class SymbolicCache:
    """Fill-reducing orderings and closed factor patterns, keyed by sparsity pattern.

    Safe to share between threads.
    """

    def __init__(self) -> None:
        self._orders: dict[str, np.ndarray] = {}
        self._symbolic: dict[tuple[str, str], _Symbolic] = {}
        self._lock = threading.Lock()

    def order(self, key: str) -> np.ndarray | None:
        with self._lock:
            return self._orders.get(key)

    def set_order(self, key: str, order: np.ndarray) -> None:
        with self._lock:
            self._orders[key] = order

    def symbolic(self, key: str, order: np.ndarray, B: sp.csc_matrix) -> _Symbolic:
        okey = hashlib.sha1(order.astype(np.int64).tobytes()).hexdigest()
        with self._lock:
            sym = self._symbolic.get((key, okey))
        if sym is None:
            sym = _symbolic_analysis(B)
            with self._lock:
                self._symbolic[(key, okey)] = sym
        return sym

    def __len__(self) -> int:
        with self._lock:
            return len(self._orders)


_default_cache = SymbolicCache()


def _splu(B: sp.csc_matrix, permc_spec: str):
    try:
        return splu(B, permc_spec=permc_spec, diag_pivot_thresh=0.0, options=_SPLU_OPTIONS)
    except RuntimeError as e:
        raise NotPositiveDefiniteError(f"sparse factorization failed: {e}") from e


def factorize(A: sp.spmatrix, cache: SymbolicCache | None = None) -> SparseCholesky:
    """Factor a symmetric positive definite matrix as P'LDL'P.

    The first factorization of a pattern uses SuperLU's minimum degree ordering on
    A + A'; later ones pre-permute with the cached ordering and keep it.
    """
    cache = _default_cache if cache is None else cache
    A = sp.csc_matrix(A)
    A.sort_indices()
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"matrix must be square, got {A.shape}")
    key = pattern_key(A)

    order = cache.order(key)
    lu = None
    lu_order = np.arange(n)
    if order is None:
        first = _splu(A, "MMD_AT_PLUS_A")
        order = np.argsort(first.perm_c)
        if np.array_equal(first.perm_r, first.perm_c):
            lu = first
    B = A[order][:, order].tocsc()
    if lu is None:
        lu_order = order
        lu = _splu(B, "NATURAL")
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("factorization needed off-diagonal pivoting")
        # SuperLU may postorder the elimination tree even under NATURAL
        post = np.argsort(lu.perm_c)
        if not np.array_equal(post, np.arange(n)):
            order = order[post]
            B = B[post][:, post].tocsc()
    cache.set_order(key, order)

    d = lu.U.diagonal()
    if not np.all(np.isfinite(d)) or (d <= 0).any():
        bad = int(np.argmin(np.where(np.isfinite(d), d, -np.inf)))
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (pivot {d[bad]:.3g} at position {int(order[bad])})"
        )
    B.sort_indices()
    sym = cache.symbolic(key, order, B)
    return SparseCholesky(lu=lu, lu_order=lu_order, order=order, D=d, symbolic=sym)


class SparseCholesky:
    """A[order][:, order] = L D L' with unit lower triangular L.

    `lu` factors A[lu_order][:, lu_order]; solves go through that ordering.
    """

    def __init__(
        self, *, lu, lu_order: np.ndarray, order: np.ndarray, D: np.ndarray, symbolic: _Symbolic
    ) -> None:
        self._lu = lu
        self._lu_order = lu_order
        self.order = order
        self.inverse_order = np.argsort(order)
        self.D = D
        self._symbolic = symbolic
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return len(self.D)

    @property
    def logdet(self) -> float:
        return float(np.sum(np.log(self.D)))

    @cached_property
    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix(self._lu.L)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = np.empty_like(b)
        with self._lock:
            x[self._lu_order] = self._lu.solve(np.ascontiguousarray(b[self._lu_order]))
        return x

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """`size` draws (n x size) from N(0, A^-1).

        u = L D^(1/2) z has covariance A[order][:, order]; scattered back to the original
        ordering it has covariance A, so A^-1 u has covariance A^-1.
        """
        z = rng.standard_normal((self.n, size))
        u = self.L @ (np.sqrt(self.D)[:, None] * z)
        v = np.empty_like(u)
        v[self.order] = u
        return self.solve(v)

    def _lower_values(self) -> np.ndarray:
        """SuperLU's L scattered onto the closed symbolic pattern."""
        sym = self._symbolic
        L = sp.tril(self.L, k=-1).tocoo()
        keys = L.col.astype(np.int64) * self.n + L.row.astype(np.int64)
        pos = np.searchsorted(sym.keys, keys)
        pos_c = np.minimum(pos, max(sym.nnz - 1, 0))
        hit = (pos < sym.nnz) & (sym.keys[pos_c] == keys) if sym.nnz else np.zeros(len(keys), bool)
        stray = np.abs(L.data[~hit])
        if stray.size and stray.max() > 1e-8:
            raise NotPositiveDefiniteError("factor has entries outside its symbolic pattern")
        vals = np.zeros(sym.nnz)
        vals[pos[hit]] = L.data[hit]
        return vals

    def selected_inverse(self) -> SelectedInverse:
        """Entries of A^-1 on the closed factor pattern (Takahashi recursion).

        For j = n-1 .. 0 with J the structure of column j of L:
            Z[J, j] = -Z[J, J] l_J,    Z[j, j] = 1/d_j - l_J' Z[J, j]
        """
        sym = self._symbolic
        n = self.n
        lvals = self._lower_values()
        zvals = np.zeros(sym.nnz)
        zdiag = np.zeros(n)
        keys = sym.keys
        last = max(sym.nnz - 1, 0)
        for j in range(n - 1, -1, -1):
            lo_p, hi_p = sym.indptr[j], sym.indptr[j + 1]
            if lo_p == hi_p:
                zdiag[j] = 1.0 / self.D[j]
                continue
            J = sym.indices[lo_p:hi_p]
            l = lvals[lo_p:hi_p]
            lo = np.minimum.outer(J, J)
            hi = np.maximum.outer(J, J)
            pos = np.minimum(np.searchsorted(keys, lo * n + hi), last)
            M = np.where(lo == hi, zdiag[lo], zvals[pos])
            zj = -(M @ l)
            zvals[lo_p:hi_p] = zj
            zdiag[j] = 1.0 / self.D[j] - l @ zj
        return SelectedInverse(
            n=n, keys=keys, values=zvals, diag=zdiag, inverse_order=self.inverse_order
        )


@dataclass(frozen=True, eq=False)
class SelectedInverse:
    """Entries of an inverse on a factor pattern; indexed in the original ordering."""

    n: int
    keys: np.ndarray
    values: np.ndarray
    diag: np.ndarray
    inverse_order: np.ndarray

    def diagonal(self) -> np.ndarray:
        return self.diag[self.inverse_order]

    def entries(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Inverse entries at (rows[i], cols[i]); each pair must lie in the pattern."""
        r = self.inverse_order[np.asarray(rows, dtype=np.int64)]
        c = self.inverse_order[np.asarray(cols, dtype=np.int64)]
        lo, hi = np.minimum(r, c), np.maximum(r, c)
        want = lo * self.n + hi
        off = lo != hi
        pos = np.searchsorted(self.keys, want[off])
        found = pos < len(self.keys)
        found[found] = self.keys[pos[found]] == want[off][found]
        if not found.all():
            raise ValueError("requested entries lie outside the factor pattern")
        out = self.diag[lo].astype(float, copy=True)
        out[off] = self.values[pos]
        return out

    def trace_product(self, A: sp.spmatrix) -> float:
        """Tr(A X) for symmetric A whose pattern is contained in the factor pattern."""
        coo = sp.coo_matrix(A)
        if coo.nnz == 0:
            return 0.0
        return float(np.dot(coo.data, self.entries(coo.row, coo.col)))

    def on_pattern(self, pattern: sp.spmatrix) -> sp.csc_matrix:
        """Sparse matrix carrying the inverse on the pattern of `pattern`."""
        coo = sp.coo_matrix(pattern)
        out = sp.csc_matrix((self.entries(coo.row, coo.col), (coo.row, coo.col)), shape=coo.shape)
        out.sort_indices()
        return out


def hutchinson_trace(
    factor: SparseCholesky, A: sp.spmatrix, probes: int, rng: np.random.Generator
) -> float:
    """Stochastic estimate of Tr(A M^-1) with Rademacher probes."""
    z = rng.choice(np.array([-1.0, 1.0]), size=(factor.n, probes))
    return float(np.einsum("ij,ij->", z, A @ factor.solve(z)) / probes)


class AlignedSum:
    """Several sparse matrices stored on their union pattern.

    `combine(coeffs)` returns sum_i coeffs[i] * mats[i] with the exact same pattern on
    every call, so the factorization cache hits once the ordering is known.
    """

    def __init__(self, mats: list[sp.spmatrix]) -> None:
        shape = mats[0].shape
        n_rows = shape[0]
        union = sp.csc_matrix(shape)
        for m in mats:
            ones = sp.csc_matrix(m, copy=True)
            ones.data = np.ones_like(ones.data, dtype=float)
            union = union + ones
        union = sp.csc_matrix(union)
        union.sort_indices()
        self.shape = shape
        self.indptr = union.indptr.copy()
        self.indices = union.indices.copy()
        cols = np.repeat(np.arange(shape[1], dtype=np.int64), np.diff(self.indptr))
        keys = cols * n_rows + self.indices.astype(np.int64)

        self.data: list[np.ndarray] = []
        for m in mats:
            coo = sp.coo_matrix(m)
            pos = np.searchsorted(keys, coo.col.astype(np.int64) * n_rows + coo.row)
            d = np.zeros(len(keys))
            np.add.at(d, pos, coo.data)
            self.data.append(d)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def combine(self, coeffs) -> sp.csc_matrix:
        values = np.zeros(self.nnz)
        for c, d in zip(coeffs, self.data):
            if c != 0.0:
                values += c * d
        return sp.csc_matrix((values, self.indices, self.indptr), shape=self.shape)
