"""Triangular meshes on a disc and piecewise-linear point location."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .errors import EventOutsideMesh, ValidationError
from .sparse import SparseSym

log = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
_BARY_TOL = 1e-10


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    _adj: SparseSym = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValidationError("vertices must be an (n, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValidationError("triangles must be an (m, 3) array")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.n):
            raise ValidationError("triangle index out of range")
        # orient counter-clockwise
        a = self.signed_areas()
        flip = a < 0
        self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]

    @property
    def n(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return np.abs(self.signed_areas())

    @property
    def area(self):
        return float(self.areas().sum())

    def edges(self):
        """Unique undirected edges as an (e, 2) array with i > j."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)[:, ::-1]
        return np.unique(e, axis=0)

    def edge_triangle_counts(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def adjacency(self) -> SparseSym:
        """Vertex adjacency pattern with the diagonal."""
        if self._adj is None:
            e = self.edges()
            r = np.concatenate([e[:, 0], np.arange(self.n)])
            c = np.concatenate([e[:, 1], np.arange(self.n)])
            self._adj = SparseSym.from_coo(self.n, r, c, sum_duplicates=False)
        return self._adj

    def basis_volumes(self):
        """Integral of each linear hat function: one third of the incident area."""
        vol = np.zeros(self.n)
        np.add.at(vol, self.triangles.ravel(), np.repeat(self.areas() / 3.0, 3))
        return vol

    def check(self):
        if np.any(self.signed_areas() <= 0):
            raise ValidationError("degenerate or misoriented triangle")
        if np.any(self.edge_triangle_counts() > 2):
            raise ValidationError("edge shared by more than two triangles")

    def locate(self, points, chunk=256):
        """Containing triangle and barycentric coordinates for each point.

        Raises EventOutsideMesh for points outside every triangle.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        P = self.vertices[self.triangles]
        a, b, c = P[:, 0], P[:, 1], P[:, 2]
        det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        tri = np.empty(len(pts), np.int64)
        bary = np.empty((len(pts), 3))
        for s in range(0, len(pts), chunk):
            q = pts[s:s + chunk]
            dx = q[:, None, 0] - a[None, :, 0]
            dy = q[:, None, 1] - a[None, :, 1]
            l1 = ((c[:, 1] - a[:, 1]) * dx - (c[:, 0] - a[:, 0]) * dy) / det
            l2 = (-(b[:, 1] - a[:, 1]) * dx + (b[:, 0] - a[:, 0]) * dy) / det
            l0 = 1.0 - l1 - l2
            worst = np.minimum(np.minimum(l0, l1), l2)
            k = np.argmax(worst, axis=1)
            rows = np.arange(len(q))
            if np.any(worst[rows, k] < -_BARY_TOL):
                bad = s + int(np.flatnonzero(worst[rows, k] < -_BARY_TOL)[0])
                raise EventOutsideMesh(f"point {pts[bad]} lies outside the mesh")
            tri[s:s + chunk] = k
            w = np.stack([l0[rows, k], l1[rows, k], l2[rows, k]], axis=1)
            w = np.clip(w, 0.0, None)
            bary[s:s + chunk] = w / w.sum(axis=1, keepdims=True)
        return tri, bary

    def interpolate(self, values, points):
        tri, bary = self.locate(points)
        return np.einsum("ij,ij->i", bary, np.asarray(values)[self.triangles[tri]])

    def to_csv(self, vertices_path, triangles_path):
        np.savetxt(vertices_path, self.vertices, delimiter=",", fmt="%.17g", header="x,y", comments="")
        np.savetxt(triangles_path, self.triangles, delimiter=",", fmt="%d", header="a,b,c", comments="")

    @classmethod
    def from_csv(cls, vertices_path, triangles_path):
        v = np.loadtxt(vertices_path, delimiter=",", skiprows=1, ndmin=2)
        t = np.loadtxt(triangles_path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        return cls(v, t)


def _ring_points(radius, counts):
    """Centre plus concentric rings with the given point counts."""
    K = len(counts)
    pts = [np.zeros((1, 2))]
    for k, m in enumerate(counts, start=1):
        r = radius * k / K
        ang = k * GOLDEN_ANGLE + 2 * np.pi * np.arange(m) / m
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
    return np.concatenate(pts)


def _triangulate(points):
    tri = Delaunay(points)
    mesh = Mesh(points, tri.simplices.astype(np.int64))
    keep = mesh.areas() > 1e-12 * max(mesh.area, 1.0)
    if not np.all(keep):
        mesh = Mesh(points, mesh.triangles[keep])
    used = np.unique(mesh.triangles)
    if used.size != len(points):
        remap = -np.ones(len(points), np.int64)
        remap[used] = np.arange(used.size)
        mesh = Mesh(points[used], remap[mesh.triangles])
    mesh.check()
    return mesh


def make_disc_mesh(radius: float, target_edge_length: float) -> Mesh:
    """Delaunay mesh of concentric rings with spacing close to the target edge."""
    if not radius > 0 or not target_edge_length > 0:
        raise ValidationError("radius and edge length must be positive")
    K = max(1, int(np.ceil(radius / target_edge_length - 1e-9)))
    counts = [max(6, int(round(2 * np.pi * radius * k / K / target_edge_length))) for k in range(1, K + 1)]
    return _triangulate(_ring_points(radius, counts))


def make_disc_mesh_n(radius: float, n: int) -> Mesh:
    """Disc mesh with exactly ``n`` vertices.

    Ring k of K receives a share of the n - 1 off-centre points proportional
    to k (largest-remainder rounding), as for a hexagonal layout.
    """
    if not radius > 0 or n < 7:
        raise ValidationError("need radius > 0 and n >= 7")
    K = max(1, int(round((-3 + np.sqrt(9 + 12 * (n - 1))) / 6)))
    share = (n - 1) * np.arange(1, K + 1) / (K * (K + 1) / 2)
    base = np.floor(share).astype(int)
    rem = (n - 1) - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:rem]] += 1
    if np.any(base < 3):
        raise ValidationError("too few vertices for the ring layout")
    return _triangulate(_ring_points(radius, base.tolist()))


def lgcp_discretise(mesh: Mesh, dt: float):
    """Integration weights eta_j = dt * basis volume and an event-matrix builder.

    The returned callable maps an (E, 2) array of event coordinates to the
    sparse E x n matrix of barycentric weights (rows sum to one).
    """
    import scipy.sparse as sp

    if not dt > 0:
        raise ValidationError("dt must be positive")
    eta = dt * mesh.basis_volumes()

    def c2(events):
        events = np.asarray(events, float).reshape(-1, 2)
        if len(events) == 0:
            return sp.csr_matrix((0, mesh.n))
        tri, bary = mesh.locate(events)
        rows = np.repeat(np.arange(len(events)), 3)
        return sp.csr_matrix((bary.ravel(), (rows, mesh.triangles[tri].ravel())), shape=(len(events), mesh.n))

    return eta, c2


def event_weights(mesh: Mesh, events):
    """Per-vertex accumulated barycentric weight of the events (1^T C2)."""
    h = np.zeros(mesh.n)
    events = np.asarray(events, float).reshape(-1, 2)
    if len(events):
        tri, bary = mesh.locate(events)
        np.add.at(h, mesh.triangles[tri].ravel(), bary.ravel())
    return h
