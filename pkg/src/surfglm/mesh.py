"""Triangular surface meshes, lumped-mass/cotangent FEM operators and data projectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .config import PROJECTION_TOL_MM

logger = logging.getLogger(__name__)

__all__ = [
    "MeshError",
    "TriangularMesh",
    "FemOperators",
    "Projector",
    "assemble_fem",
    "build_projector",
    "flat_grid",
    "icosphere",
    "disjoint_union",
]

# candidate triangles examined per location when projecting
_PROJECTION_CANDIDATES = 16


class MeshError(ValueError):
    pass


def _as_3d(points: np.ndarray) -> np.ndarray:
    if points.shape[1] == 3:
        return points
    return np.column_stack([points, np.zeros(len(points))])


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = _as_3d(vertices)
    a, b, c = v[triangles[:, 0]], v[triangles[:, 1]], v[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriangularMesh:
    """Vertices in mm (2-D planar or 3-D embedded) and 0-based vertex triples."""

    vertices: np.ndarray
    triangles: np.ndarray
    check_connected: bool = True

    def __post_init__(self) -> None:
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError(f"vertices must be (n, 2) or (n, 3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or len(triangles) == 0:
            raise MeshError(f"triangles must be a non-empty (m, 3) array, got {triangles.shape}")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        self._validate()

    def _validate(self) -> None:
        n = len(self.vertices)
        bad = np.flatnonzero((self.triangles < 0).any(axis=1) | (self.triangles >= n).any(axis=1))
        if bad.size:
            raise MeshError(f"triangle {int(bad[0])} references a vertex outside [0, {n})")

        areas = self.areas
        scale = float(np.ptp(self.vertices, axis=0).max()) or 1.0
        degenerate = np.flatnonzero(areas <= 1e-14 * scale * scale)
        if degenerate.size:
            raise MeshError(f"degenerate (zero-area) triangle at index {int(degenerate[0])}")

        _, counts = np.unique(self.edges, axis=0, return_counts=True)
        if (counts > 2).any():
            raise MeshError("non-manifold mesh: an edge is shared by more than two triangles")

        if self.check_connected:
            n_comp, _ = connected_components(self.adjacency, directed=False)
            unused = n - np.unique(self.triangles).size
            if n_comp > 1 or unused:
                raise MeshError(
                    f"mesh is not connected ({n_comp} components, {unused} unused vertices)"
                )

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @cached_property
    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """All triangle edges, (3m, 2), smaller index first, with repeats."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    @cached_property
    def edge_lengths(self) -> sp.csr_matrix:
        """Symmetric sparse graph weighted by Euclidean edge length."""
        e = np.unique(self.edges, axis=0)
        d = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        g = sp.coo_matrix((d, (e[:, 0], e[:, 1])), shape=(self.n, self.n))
        return (g + g.T).tocsr()

    @property
    def adjacency(self) -> sp.csr_matrix:
        g = self.edge_lengths.copy()
        g.data[:] = 1.0
        return g

    def graph_distances(self, limit: float, chunk: int = 256) -> sp.csr_matrix:
        """Shortest-path distances along mesh edges, kept only within `limit` mm.

        The diagonal is stored explicitly as zeros so callers see every vertex as its
        own neighbour.
        """
        graph = self.edge_lengths
        rows, cols, vals = [], [], []
        for start in range(0, self.n, chunk):
            idx = np.arange(start, min(start + chunk, self.n))
            d = dijkstra(graph, directed=False, indices=idx, limit=limit)
            r, c = np.nonzero(np.isfinite(d))
            rows.append(idx[r])
            cols.append(c)
            vals.append(d[r, c])
        out = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n),
        )
        return out


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Lumped mass C (diagonal, mm^2), cotangent stiffness G and G C^-1 G."""

    C: sp.csc_matrix
    G: sp.csc_matrix
    GCinvG: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @cached_property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()


def assemble_fem(mesh: TriangularMesh) -> FemOperators:
    """Linear-element FEM matrices for the SPDE prior on `mesh`."""
    # canonical triangle order so the floating point sums do not depend on input order
    tri = np.sort(mesh.triangles, axis=1)
    tri = tri[np.lexsort(tri.T[::-1])]
    v = _as_3d(mesh.vertices)
    areas = _triangle_areas(mesh.vertices, tri)
    n = mesh.n

    c = np.bincount(tri.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=n)

    rows, cols, vals = [], [], []
    for corner in range(3):
        k = tri[:, corner]
        i = tri[:, (corner + 1) % 3]
        j = tri[:, (corner + 2) % 3]
        u = v[i] - v[k]
        w = v[j] - v[k]
        # cot of the angle at k, opposite edge (i, j); |u x w| = 2 * area
        cot = np.einsum("ij,ij->i", u, w) / (2.0 * areas)
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    off = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    off.sum_duplicates()
    G = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsc()
    G.sort_indices()

    C = sp.diags(c).tocsc()
    GCinvG = (G @ sp.diags(1.0 / c) @ G).tocsc()
    GCinvG = (0.5 * (GCinvG + GCinvG.T)).tocsc()
    GCinvG.sort_indices()
    logger.debug(f"assembled FEM on {n} vertices, area {c.sum():.4g} mm^2, nnz(G)={G.nnz}")
    return FemOperators(C=C, G=G, GCinvG=GCinvG)


@dataclass(frozen=True, eq=False)
class Projector:
    """Sparse N x n barycentric map from mesh coefficients to data locations."""

    Psi: sp.csr_matrix
    identity: bool = False

    @property
    def N(self) -> int:
        return self.Psi.shape[0]

    @property
    def n(self) -> int:
        return self.Psi.shape[1]

    @classmethod
    def eye(cls, n: int) -> Projector:
        return cls(Psi=sp.identity(n, format="csr"), identity=True)

    def expand(self, K: int) -> sp.csr_matrix:
        """Block-diagonal NK x nK version acting on task-stacked coefficients."""
        return sp.kron(sp.identity(K, format="csr"), self.Psi, format="csr")

    def project(self, w: np.ndarray) -> np.ndarray:
        """Map (n,) or (n, K) mesh values to data locations."""
        if self.identity:
            return np.array(w, copy=True)
        return np.asarray(self.Psi @ w)


def _closest_on_triangles(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Barycentric weights of the closest point on each triangle (a, b, c) to p."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_in, w_in = vb * denom, vc * denom

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    zero, one = np.zeros_like(d1), np.ones_like(d1)
    v = np.select(conds, [zero, one, t_ab, zero, zero, 1 - t_bc], default=v_in)
    w = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], default=w_in)
    return np.column_stack([1.0 - v - w, v, w])


def build_projector(
    mesh: TriangularMesh, locations: np.ndarray, tol: float = PROJECTION_TOL_MM
) -> Projector:
    """Barycentric projector from `mesh` to `locations` (N x 2 or N x 3, mm).

    Locations that coincide with vertices get unit rows; the rest are projected to the
    closest point on the nearest triangles. Anything farther than `tol` from the surface
    is rejected.
    """
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[1] not in (2, 3):
        raise MeshError(f"locations must be (N, 2) or (N, 3), got {locations.shape}")
    if locations.shape[1] != mesh.dim:
        if locations.shape[1] == 3 and mesh.dim == 2 and np.allclose(locations[:, 2], 0.0):
            locations = locations[:, :2]
        else:
            raise MeshError(f"locations are {locations.shape[1]}-D but the mesh is {mesh.dim}-D")

    n_loc, n = len(locations), mesh.n
    if n_loc == n and np.array_equal(locations, mesh.vertices):
        return Projector.eye(n)

    vdist, vidx = cKDTree(mesh.vertices).query(locations)
    scale = float(np.ptp(mesh.vertices, axis=0).max()) or 1.0
    on_vertex = vdist <= 1e-12 * scale

    rows = [np.flatnonzero(on_vertex)]
    cols = [vidx[on_vertex]]
    vals = [np.ones(int(on_vertex.sum()))]

    rest = np.flatnonzero(~on_vertex)
    if rest.size:
        verts = _as_3d(mesh.vertices)
        tri = mesh.triangles
        centroids = verts[tri].mean(axis=1)
        k = min(_PROJECTION_CANDIDATES, len(tri))
        p = _as_3d(locations[rest])
        _, cand = cKDTree(centroids).query(p, k=k)
        cand = np.asarray(cand).reshape(len(rest), k)

        flat = cand.ravel()
        pp = np.repeat(p, k, axis=0)
        a, b, c = verts[tri[flat, 0]], verts[tri[flat, 1]], verts[tri[flat, 2]]
        bary = _closest_on_triangles(pp, a, b, c)
        closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
        dist = np.linalg.norm(closest - pp, axis=1).reshape(len(rest), k)
        best = dist.argmin(axis=1)
        best_dist = dist[np.arange(len(rest)), best]

        far = rest[best_dist > tol]
        if far.size:
            shown = ", ".join(str(i) for i in far[:20])
            more = f" (+{far.size - 20} more)" if far.size > 20 else ""
            raise MeshError(f"locations farther than {tol} mm from the surface: {shown}{more}")

        pick = np.arange(len(rest)) * k + best
        weights = np.clip(bary[pick], 0.0, None)
        weights /= weights.sum(axis=1, keepdims=True)
        rows.append(np.repeat(rest, 3))
        cols.append(tri[cand[np.arange(len(rest)), best]].ravel())
        vals.append(weights.ravel())

    Psi = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_loc, n)
    )
    Psi.eliminate_zeros()
    Psi.sort_indices()
    return Projector(Psi=Psi, identity=False)


def flat_grid(nx: int, ny: int, width: float = 100.0, height: float | None = None) -> TriangularMesh:
    """Planar nx x ny vertex grid on [0, width] x [0, height], two triangles per cell."""
    if nx < 2 or ny < 2:
        raise MeshError("a grid needs at least 2 vertices per side")
    height = width if height is None else height
    xs, ys = np.linspace(0.0, width, nx), np.linspace(0.0, height, ny)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    triangles = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return TriangularMesh(vertices, triangles)


def icosphere(subdivisions: int = 3, radius: float = 100.0) -> TriangularMesh:
    """Subdivided icosahedron with 10 * 4**subdivisions + 2 vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    points = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = points[i] + points[j]
                points.append(m / np.linalg.norm(m))
                cache[key] = len(points) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined

    return TriangularMesh(radius * np.array(points), np.array(faces))


def disjoint_union(meshes: list[TriangularMesh]) -> TriangularMesh:
    """Stack independent meshes (e.g. hemispheres) into one disconnected mesh."""
    offsets = np.cumsum([0] + [m.n for m in meshes[:-1]])
    dim = max(m.dim for m in meshes)
    vertices = np.concatenate(
        [_as_3d(m.vertices) if dim == 3 else m.vertices for m in meshes]
    )
    triangles = np.concatenate([m.triangles + off for m, off in zip(meshes, offsets)])
    return TriangularMesh(vertices, triangles, check_connected=False)
