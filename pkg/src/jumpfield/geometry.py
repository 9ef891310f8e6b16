"""Half-edge triangle mesh in the unit canvas with remeshing operations.

Conventions used throughout the package:

* canvas is the unit square [0,1]x[0,1]; x runs along image columns and
  y along image rows, so pixel (row, col) has center ((col+.5)/W, (row+.5)/H)
* faces store vertex indices with positive signed area ("CCW" in these
  coordinates)
* an undirected edge is the canonical pair (min_idx, max_idx); per-edge
  quantities live on these keys, per-half-edge quantities on (edge, slot)
  where slot 0 is the half-edge leaving the lower-indexed vertex
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

# degenerate-triangle guard for remeshing legality checks (canvas units^2)
AREA_EPS = 1e-14
# finite stand-in for the cotan trace of a degenerate quad
DEGENERATE_TRACE_PENALTY = 1e12
# below this radius the local polar angle is undefined
RADIUS_EPS = 1e-12

TWO_PI = 2.0 * np.pi


class OutsideDomainError(ValueError):
    """Query point is not covered by any mesh face."""


class DegenerateRadiusError(ValueError):
    """Query point coincides with the polar center vertex."""


def signed_area(p0, p1, p2):
    """Signed area of triangle(s); positive for CCW orientation."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])


def perp(d):
    """Left-hand normal (-dy, dx) of direction vector(s) d."""
    d = np.asarray(d, dtype=np.float64)
    out = np.empty_like(d)
    out[..., 0] = -d[..., 1]
    out[..., 1] = d[..., 0]
    return out


def orient_ccw(vertices, faces):
    """Flip any CW face in place so all signed areas are positive."""
    faces = np.asarray(faces, dtype=np.int32).copy()
    v = np.asarray(vertices, dtype=np.float64)
    ar = signed_area(v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]])
    cw = ar < 0
    faces[cw] = faces[cw][:, [0, 2, 1]]
    return faces


def edge_key(a: int, b: int) -> tuple:
    return (int(a), int(b)) if a < b else (int(b), int(a))


@dataclass
class EditResult:
    """Outcome of one remeshing operation.

    ``vertex_map`` maps old vertex indices to new ones (-1 = removed).
    For splits, ``new_vertex`` is the inserted midpoint index and
    ``spoke_edges`` the brand-new edges that need fresh attributes.
    """

    status: str  # "ok" or "rejected: <reason>"
    vertex_map: Optional[np.ndarray] = None
    kept_vertex: int = -1
    removed_vertex: int = -1
    new_vertex: int = -1
    parent_edge: Optional[tuple] = None
    child_edges: tuple = ()
    spoke_edges: tuple = ()
    flipped_to: Optional[tuple] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class Mesh2D:
    """Triangle mesh with derived half-edge connectivity tables.

    ``vertices`` (nv,2) float64 and ``faces`` (nf,3) int32 are the source of
    truth; all derived tables are rebuilt after a structural edit. The mesh
    is treated as immutable while sampling; remeshing and vertex updates
    happen single-writer between epochs.
    """

    def __init__(self, vertices, faces, initial_positions=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be (nv, 2)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (nf, 3)")
        if initial_positions is None:
            self.initial_positions = self.vertices.copy()
        else:
            self.initial_positions = np.asarray(initial_positions, dtype=np.float64).copy()
        self._rebuild()

    # ------------------------------------------------------------------
    # derived connectivity
    # ------------------------------------------------------------------

    def _rebuild(self):
        nf = len(self.faces)
        nv = len(self.vertices)
        f = self.faces
        if nf and (f.min() < 0 or f.max() >= nv):
            raise ValueError("face index out of range")

        # corner-table half-edges: he = 3*face + corner, origin faces[f,c]
        he_origin = f.ravel().astype(np.int32)
        he_dest = f[:, [1, 2, 0]].ravel().astype(np.int32)
        self.he_origin = he_origin
        self.he_dest = he_dest

        lo = np.minimum(he_origin, he_dest).astype(np.int64)
        hi = np.maximum(he_origin, he_dest).astype(np.int64)
        key = lo * nv + hi
        uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if np.any(counts > 2):
            raise ValueError("non-manifold edge (more than two incident faces)")
        self.he_edge = inverse.astype(np.int32)
        self.edges = np.stack([uniq // nv, uniq % nv], axis=1).astype(np.int32)
        ne = len(self.edges)

        order = np.argsort(inverse, kind="stable")
        starts = np.searchsorted(inverse[order], np.arange(ne))
        he_twin = np.full(3 * nf, -1, dtype=np.int32)
        both = counts == 2
        a_idx = order[starts[both]]
        b_idx = order[starts[both] + 1]
        he_twin[a_idx] = b_idx
        he_twin[b_idx] = a_idx
        self.he_twin = he_twin

        self.boundary_edge = counts == 1

        self.boundary_vertex = np.zeros(nv, dtype=bool)
        if np.any(self.boundary_edge):
            self.boundary_vertex[self.edges[self.boundary_edge].ravel()] = True

        # directed-edge incidence per vertex (ring CSR): every edge appears
        # once per endpoint; slot 0 iff the endpoint is the lower index
        ring_vertex = self.edges.ravel()
        ring_edge = np.repeat(np.arange(ne, dtype=np.int32), 2)
        ring_slot = np.tile(np.array([0, 1], dtype=np.int8), ne)
        ring_nbr = self.edges[:, ::-1].ravel()
        order = np.argsort(ring_vertex, kind="stable")
        self.ring_vertex = ring_vertex[order].astype(np.int32)
        self.ring_edge = ring_edge[order]
        self.ring_slot = ring_slot[order]
        self.ring_nbr = ring_nbr[order].astype(np.int32)
        ptr = np.zeros(nv + 1, dtype=np.int64)
        np.add.at(ptr, ring_vertex + 1, 1)
        np.cumsum(ptr, out=ptr)
        self.ring_ptr = ptr

        # faces on the two sides of each edge: slot 0 = face containing
        # the half-edge that leaves the lower endpoint
        self.edge_face = np.full((ne, 2), -1, dtype=np.int32)
        he_ids = np.arange(3 * nf)
        slot = np.where(he_origin == self.edges[self.he_edge, 0], 0, 1)
        self.edge_face[self.he_edge, slot] = (he_ids // 3).astype(np.int32)

        self._locator = None
        self._edge_lookup = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def invalidate_geometry(self):
        """Call after mutating vertex positions in place."""
        self._locator = None

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return signed_area(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]])

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices
        d = v[self.edges[:, 1]] - v[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_id(self, a: int, b: int) -> int:
        """Edge index of the undirected pair (a, b), or -1."""
        if self._edge_lookup is None:
            keys = self.edges[:, 0].astype(np.int64) * self.n_vertices + self.edges[:, 1]
            self._edge_lookup = keys
        lo, hi = edge_key(a, b)
        want = np.int64(lo) * self.n_vertices + hi
        idx = int(np.searchsorted(self._edge_lookup, want))
        if idx < self.n_edges and self._edge_lookup[idx] == want:
            return idx
        return -1

    def vertex_ring_edges(self, v: int):
        """(edge ids, slots, neighbor vertices) of all edges incident to v."""
        s, e = self.ring_ptr[v], self.ring_ptr[v + 1]
        return self.ring_edge[s:e], self.ring_slot[s:e], self.ring_nbr[s:e]

    def opposite_vertices(self, e: int):
        """Vertices opposite edge e in its one or two incident faces."""
        a, b = self.edges[e]
        out = []
        for fi in self.edge_face[e]:
            if fi < 0:
                continue
            tri = self.faces[fi]
            out.append(int(tri[(tri != a) & (tri != b)][0]))
        return out

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------

    def _build_locator(self):
        v = self.vertices
        f = self.faces
        nf = len(f)
        res = max(4, int(np.sqrt(max(nf, 1))))
        lo = v.min(axis=0)
        hi = v.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        tri = v[f]
        bmin = tri.min(axis=1)
        bmax = tri.max(axis=1)
        c0 = np.clip(((bmin - lo) / span * res).astype(np.int64), 0, res - 1)
        c1 = np.clip(((bmax - lo) / span * res).astype(np.int64), 0, res - 1)
        dx = c1[:, 0] - c0[:, 0] + 1
        dy = c1[:, 1] - c0[:, 1] + 1
        counts = dx * dy
        total = int(counts.sum())
        face_of = np.repeat(np.arange(nf, dtype=np.int32), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        dy_rep = np.repeat(dy, counts)
        lx = local // dy_rep
        ly = local % dy_rep
        cell_of = (np.repeat(c0[:, 0], counts) + lx) * res + (np.repeat(c0[:, 1], counts) + ly)
        order = np.lexsort((face_of, cell_of))
        cell_of = cell_of[order]
        face_of = face_of[order]
        ptr = np.zeros(res * res + 1, dtype=np.int64)
        np.add.at(ptr, cell_of + 1, 1)
        np.cumsum(ptr, out=ptr)
        self._locator = (res, lo, span, ptr, face_of)

    def locate(self, points, tol=1e-12):
        """Containing face and barycentric coords for a batch of points.

        Returns (face (n,), lam (n,3)); face = -1 where the point is outside
        every face. Ties on shared edges/vertices resolve to the lowest face
        index, identical to a linear scan in index order.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(pts)
        if self._locator is None:
            self._build_locator()
        res, lo, span, ptr, face_of = self._locator
        cell = np.clip(((pts - lo) / span * res).astype(np.int64), 0, res - 1)
        cid = cell[:, 0] * res + cell[:, 1]
        starts = ptr[cid]
        counts = ptr[cid + 1] - starts
        total = int(counts.sum())
        samp = np.repeat(np.arange(n), counts)
        offs = np.repeat(starts, counts) + (
            np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        )
        cand = face_of[offs]
        lam = self._barycentric(pts[samp], cand)
        valid = np.all(lam >= -tol, axis=1)
        big = np.iinfo(np.int64).max
        fkey = np.where(valid, cand.astype(np.int64), big)
        best = np.full(n, big, dtype=np.int64)
        np.minimum.at(best, samp, fkey)
        face = np.where(best == big, -1, best)
        out_lam = np.zeros((n, 3))
        hit = face >= 0
        if np.any(hit):
            lam_hit = self._barycentric(pts[hit], face[hit])
            np.clip(lam_hit, 0.0, 1.0, out=lam_hit)
            lam_hit /= lam_hit.sum(axis=1, keepdims=True)
            out_lam[hit] = lam_hit
        return face, out_lam

    def _barycentric(self, pts, face_idx):
        tri = self.vertices[self.faces[face_idx]]
        d1 = tri[:, 1] - tri[:, 0]
        d2 = tri[:, 2] - tri[:, 0]
        dp = pts - tri[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        l1 = (dp[:, 0] * d2[:, 1] - dp[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * dp[:, 1] - d1[:, 1] * dp[:, 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)

    def face_inverse_jacobians(self):
        """Per-face inverse of M = [v1-v0, v2-v0] (columns), for grads."""
        tri = self.vertices[self.faces]
        d1 = tri[:, 1] - tri[:, 0]
        d2 = tri[:, 2] - tri[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        inv = np.empty((len(tri), 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        return inv

    def point_in_face(self, x):
        """Single-point location; raises OutsideDomainError when uncovered."""
        face, lam = self.locate(np.asarray(x, dtype=np.float64)[None])
        if face[0] < 0:
            raise OutsideDomainError(f"point {x} outside mesh domain")
        return int(face[0]), float(lam[0, 1]), float(lam[0, 2])

    # ------------------------------------------------------------------
    # local polar coordinate
    # ------------------------------------------------------------------

    def local_polar_t(self, x, v_i: int, v_j: int) -> float:
        """CCW angle of x around v_i, measured from edge (v_i, v_j), in [0,1)."""
        x = np.asarray(x, dtype=np.float64)
        d = x - self.vertices[v_i]
        if np.hypot(d[0], d[1]) < RADIUS_EPS:
            raise DegenerateRadiusError(f"query coincides with vertex {v_i}")
        e = self.vertices[v_j] - self.vertices[v_i]
        theta = np.arctan2(d[1], d[0])
        theta_e = np.arctan2(e[1], e[0])
        return float(np.mod((theta - theta_e) / TWO_PI, 1.0))

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------

    def check_invariants(self):
        """Raise AssertionError when any connectivity invariant is broken."""
        areas = self.face_areas()
        assert np.all(areas > 0), "face with non-positive signed area"
        has_twin = self.he_twin >= 0
        t = self.he_twin[has_twin]
        assert np.array_equal(self.he_origin[has_twin], self.he_dest[t])
        assert np.array_equal(self.he_dest[has_twin], self.he_origin[t])
        assert np.array_equal(self.he_twin[t], np.flatnonzero(has_twin))
        cnt = np.bincount(self.he_edge, minlength=self.n_edges)
        assert np.all(cnt[self.boundary_edge] == 1), "boundary edge with twin"
        assert np.all(cnt[~self.boundary_edge] == 2), "interior edge without twin"
        # each incident edge appears exactly once in its endpoint's ring
        ring_key = self.ring_vertex.astype(np.int64) * self.n_edges + self.ring_edge
        assert len(np.unique(ring_key)) == len(ring_key)
        assert self.ring_ptr[-1] == 2 * self.n_edges
        f = self.faces
        assert np.all(f[:, 0] != f[:, 1])
        assert np.all(f[:, 1] != f[:, 2])
        assert np.all(f[:, 2] != f[:, 0])
        return True

    # ------------------------------------------------------------------
    # remeshing
    # ------------------------------------------------------------------

    def _vertex_link(self, v: int) -> set:
        _, _, nbrs = self.vertex_ring_edges(v)
        return set(int(u) for u in nbrs)

    def _canvas_sides(self, v: int):
        """Canvas side tags of vertex v, judged from its anchor position."""
        p = self.initial_positions[v]
        sides = []
        if abs(p[0] - 0.0) < 1e-9:
            sides.append("x0")
        if abs(p[0] - 1.0) < 1e-9:
            sides.append("x1")
        if abs(p[1] - 0.0) < 1e-9:
            sides.append("y0")
        if abs(p[1] - 1.0) < 1e-9:
            sides.append("y1")
        return sides

    def collapse_edge(self, e: int) -> EditResult:
        """Collapse edge e, merging its endpoints; rejects illegal collapses.

        Survivor is the lower-indexed endpoint unless boundary rules force
        the other; the merged position is the midpoint for interior pairs
        and the boundary position when only one endpoint may move. Canvas
        outline preservation: corner vertices never move, boundary-edge
        collapses require both endpoints on one canvas side.
        """
        a, b = (int(x) for x in self.edges[e])
        ba, bb = bool(self.boundary_vertex[a]), bool(self.boundary_vertex[b])
        is_bnd_edge = bool(self.boundary_edge[e])

        if ba and bb and not is_bnd_edge:
            return EditResult("rejected: interior edge joining boundary vertices")

        shared = self._vertex_link(a) & self._vertex_link(b)
        opp = set(self.opposite_vertices(e))
        if shared != opp:
            return EditResult("rejected: link condition")

        corner_a = len(self._canvas_sides(a)) >= 2
        corner_b = len(self._canvas_sides(b)) >= 2
        if corner_a and corner_b:
            return EditResult("rejected: would merge canvas corners")
        if corner_a:
            keep, gone = a, b
            pos = self.vertices[a].copy()
        elif corner_b:
            keep, gone = b, a
            pos = self.vertices[b].copy()
        elif ba and not bb:
            keep, gone = a, b
            pos = self.vertices[a].copy()
        elif bb and not ba:
            keep, gone = b, a
            pos = self.vertices[b].copy()
        elif ba and bb:
            if not set(self._canvas_sides(a)) & set(self._canvas_sides(b)):
                return EditResult("rejected: boundary endpoints on different sides")
            keep, gone = a, b
            pos = 0.5 * (self.vertices[a] + self.vertices[b])
        else:
            keep, gone = a, b
            pos = 0.5 * (self.vertices[a] + self.vertices[b])

        dead_faces = [int(fi) for fi in self.edge_face[e] if fi >= 0]
        new_faces = self.faces.copy()
        new_faces[new_faces == gone] = keep
        keep_mask = np.ones(len(new_faces), dtype=bool)
        keep_mask[dead_faces] = False
        affected = np.flatnonzero(
            np.any(self.faces == keep, axis=1) | np.any(self.faces == gone, axis=1)
        )
        verts = self.vertices.copy()
        verts[keep] = pos
        for fi in affected:
            if not keep_mask[fi]:
                continue
            tri = new_faces[fi]
            if signed_area(verts[tri[0]], verts[tri[1]], verts[tri[2]]) <= AREA_EPS:
                return EditResult("rejected: would invert face")

        nv = self.n_vertices
        vertex_map = np.arange(nv, dtype=np.int64)
        vertex_map[gone] = -1
        vertex_map[gone + 1 :] -= 1
        self.vertices[keep] = pos
        self.vertices = np.delete(self.vertices, gone, axis=0)
        self.initial_positions = np.delete(self.initial_positions, gone, axis=0)
        packed = vertex_map[new_faces[keep_mask]]
        self.faces = packed.astype(np.int32)
        self._rebuild()
        return EditResult(
            "ok",
            vertex_map=vertex_map,
            kept_vertex=int(vertex_map[keep]),
            removed_vertex=gone,
            parent_edge=edge_key(a, b),
        )

    def split_edge(self, e: int) -> EditResult:
        """Split edge e at its midpoint; +1 vertex, +2 faces (interior)."""
        a, b = (int(x) for x in self.edges[e])
        mid = 0.5 * (self.vertices[a] + self.vertices[b])
        m = self.n_vertices
        new_faces = []
        drop = []
        spokes = []
        for fi in self.edge_face[e]:
            if fi < 0:
                continue
            tri = [int(x) for x in self.faces[fi]]
            c = [v for v in tri if v != a and v != b][0]
            i_a = tri.index(a)
            if tri[(i_a + 1) % 3] == b:  # face holds half-edge a->b
                new_faces.append((a, m, c))
                new_faces.append((m, b, c))
            else:
                new_faces.append((b, m, c))
                new_faces.append((m, a, c))
            drop.append(int(fi))
            spokes.append(edge_key(m, c))
        if not drop:
            return EditResult("rejected: edge has no incident face")
        self.vertices = np.vstack([self.vertices, mid[None]])
        self.initial_positions = np.vstack([self.initial_positions, mid[None]])
        keep_mask = np.ones(self.n_faces, dtype=bool)
        keep_mask[drop] = False
        self.faces = np.vstack(
            [self.faces[keep_mask], np.array(new_faces, dtype=np.int32)]
        ).astype(np.int32)
        self._rebuild()
        return EditResult(
            "ok",
            vertex_map=np.arange(m, dtype=np.int64),
            new_vertex=m,
            parent_edge=edge_key(a, b),
            child_edges=(edge_key(a, m), edge_key(m, b)),
            spoke_edges=tuple(spokes),
        )

    def flip_edge(self, e: int) -> EditResult:
        """Flip interior edge e to the opposite diagonal of its quad."""
        if self.boundary_edge[e]:
            return EditResult("rejected: boundary edge")
        a, b = (int(x) for x in self.edges[e])
        f_left = int(self.edge_face[e, 0])  # contains half-edge a->b
        f_right = int(self.edge_face[e, 1])  # contains half-edge b->a
        tl = [int(x) for x in self.faces[f_left]]
        tr = [int(x) for x in self.faces[f_right]]
        c = [v for v in tl if v != a and v != b][0]
        d = [v for v in tr if v != a and v != b][0]
        if c == d:
            return EditResult("rejected: degenerate quad")
        if self.edge_id(c, d) >= 0:
            return EditResult("rejected: flipped edge already exists")
        v = self.vertices
        # quad in CCW order is (a, d, b, c); new faces (a, d, c), (d, b, c)
        # are both strictly CCW iff the quad is strictly convex
        tri1 = (a, d, c)
        tri2 = (d, b, c)
        if signed_area(v[tri1[0]], v[tri1[1]], v[tri1[2]]) <= AREA_EPS:
            return EditResult("rejected: non-convex quad")
        if signed_area(v[tri2[0]], v[tri2[1]], v[tri2[2]]) <= AREA_EPS:
            return EditResult("rejected: non-convex quad")
        self.faces[f_left] = tri1
        self.faces[f_right] = tri2
        self._rebuild()
        return EditResult(
            "ok",
            vertex_map=np.arange(self.n_vertices, dtype=np.int64),
            parent_edge=edge_key(a, b),
            flipped_to=edge_key(c, d),
        )

    # ------------------------------------------------------------------
    # Delaunay machinery
    # ------------------------------------------------------------------

    def incircle_violation(self, e: int) -> float:
        """Positive when an opposite vertex lies inside the circumcircle."""
        if self.boundary_edge[e]:
            return -1.0
        a, b = self.edges[e]
        opp = self.opposite_vertices(e)
        c, d = opp[0], opp[1]
        v = self.vertices
        pa, pb, pc, pd = v[a], v[c], v[b], v[d]
        if signed_area(pa, pb, pc) < 0:
            pa, pc = pc, pa
        m = np.array(
            [
                [pa[0] - pd[0], pa[1] - pd[1], (pa[0] - pd[0]) ** 2 + (pa[1] - pd[1]) ** 2],
                [pb[0] - pd[0], pb[1] - pd[1], (pb[0] - pd[0]) ** 2 + (pb[1] - pd[1]) ** 2],
                [pc[0] - pd[0], pc[1] - pd[1], (pc[0] - pd[0]) ** 2 + (pc[1] - pd[1]) ** 2],
            ]
        )
        det = float(np.linalg.det(m))
        scale = max(float(np.abs(m[:, :2]).max()) ** 4, 1e-30)
        return det / scale

    def delaunay_flip_pass(self, protected=None, tol=1e-9, max_flips=None) -> int:
        """Lawson flips until no interior edge violates empty-circumcircle.

        ``protected`` is an optional set of canonical vertex pairs that are
        never flipped (constraint segments). Returns the flip count.
        """
        protected = protected or set()
        if max_flips is None:
            max_flips = 30 * max(self.n_edges, 1)
        flips = 0
        queue = deque(edge_key(*self.edges[i]) for i in range(self.n_edges))
        inq = set(queue)
        while queue and flips < max_flips:
            key = queue.popleft()
            inq.discard(key)
            if key in protected:
                continue
            e = self.edge_id(*key)
            if e < 0 or self.boundary_edge[e]:
                continue
            if self.incircle_violation(e) <= tol:
                continue
            res = self.flip_edge(e)
            if not res.ok:
                continue
            flips += 1
            c, d = res.flipped_to
            a, b = res.parent_edge
            for pair in ((a, c), (c, b), (b, d), (d, a)):
                k2 = edge_key(*pair)
                if k2 not in inq and k2 not in protected:
                    queue.append(k2)
                    inq.add(k2)
        return flips

    def is_delaunay(self, protected=None, tol=1e-9) -> bool:
        protected = protected or set()
        for e in range(self.n_edges):
            if self.boundary_edge[e]:
                continue
            if edge_key(*self.edges[e]) in protected:
                continue
            if self.incircle_violation(e) > tol:
                return False
        return True


def cotan_laplacian_trace(mesh: Mesh2D, e: int) -> float:
    """Trace of the PSD cotan Laplacian of the two faces adjacent to edge e.

    Degenerate (near-zero-area) triangles yield a large finite penalty
    rather than NaN so remeshing comparisons stay well-ordered.
    """
    if mesh.boundary_edge[e]:
        raise ValueError("cotan trace needs an interior edge")
    f0, f1 = mesh.edge_face[e]
    return quad_cotan_trace(mesh.vertices, mesh.faces[[f0, f1]])


def quad_cotan_trace(vertices, tris) -> float:
    """Cotan-Laplacian trace of an explicit list of triangles.

    trace(L) = sum over (face, corner) of cot(corner angle): each corner
    angle weights its opposite edge by cot/2 and every edge weight lands on
    two diagonal entries.
    """
    total = 0.0
    for tri in tris:
        p = [np.asarray(vertices[v], dtype=np.float64) for v in tri]
        area = signed_area(p[0], p[1], p[2])
        if abs(area) < AREA_EPS:
            return DEGENERATE_TRACE_PENALTY
        for i in range(3):
            u = p[(i + 1) % 3] - p[i]
            w = p[(i + 2) % 3] - p[i]
            cross = u[0] * w[1] - u[1] * w[0]
            if abs(cross) < 1e-300:
                return DEGENERATE_TRACE_PENALTY
            total += float(np.dot(u, w) / abs(cross))
    return total


# ----------------------------------------------------------------------
# attribute migration across remeshing
# ----------------------------------------------------------------------


@dataclass
class EdgeAttributeStore:
    """Per-edge and per-half-edge quantities that ride along with remeshing.

    ``l``/``r`` are (ne, 2, k): slot 0 belongs to the half-edge leaving the
    lower-indexed endpoint. Migration policy: collapse merges w_raw by max
    and keeps the survivor's half-edge features; split duplicates parent
    attributes onto both children while spokes start fresh; flip carries the
    old diagonal's attributes onto the new one.
    """

    w_raw: np.ndarray  # (ne,) float32
    l: np.ndarray  # (ne, 2, k) float32
    r: np.ndarray  # (ne, 2, k) float32
    frozen: np.ndarray  # (ne,) bool
    bias: np.ndarray  # (nv, k) float32

    @property
    def k(self) -> int:
        return self.l.shape[2]

    @classmethod
    def zeros(cls, n_edges: int, n_vertices: int, k: int):
        return cls(
            w_raw=np.zeros(n_edges, dtype=np.float32),
            l=np.zeros((n_edges, 2, k), dtype=np.float32),
            r=np.zeros((n_edges, 2, k), dtype=np.float32),
            frozen=np.zeros(n_edges, dtype=bool),
            bias=np.zeros((n_vertices, k), dtype=np.float32),
        )


def migrate_attributes(
    old_edges: np.ndarray,
    attrs: EdgeAttributeStore,
    mesh: Mesh2D,
    edit: EditResult,
) -> EdgeAttributeStore:
    """Rebuild an attribute store for ``mesh`` after ``edit`` was applied.

    ``old_edges`` is the pre-edit canonical edge array matching ``attrs``.
    """
    if not edit.ok:
        return attrs
    k = attrs.k
    new = EdgeAttributeStore.zeros(mesh.n_edges, mesh.n_vertices, k)
    vmap = edit.vertex_map
    touched = np.zeros(mesh.n_edges, dtype=bool)

    alive = vmap >= 0
    new.bias[vmap[alive]] = attrs.bias[np.flatnonzero(alive)]
    if edit.new_vertex >= 0 and edit.parent_edge is not None:
        pa, pb = edit.parent_edge
        new.bias[edit.new_vertex] = 0.5 * (attrs.bias[pa] + attrs.bias[pb])

    new_ids = {edge_key(int(x), int(y)): i for i, (x, y) in enumerate(mesh.edges)}

    old_keep = -1
    if edit.kept_vertex >= 0:
        old_keep = int(np.flatnonzero(vmap == edit.kept_vertex)[0])

    def resolve(old_v: int) -> int:
        nv_ = int(vmap[old_v])
        return edit.kept_vertex if nv_ < 0 else nv_

    parent = edit.parent_edge
    for old_i, (a, b) in enumerate(old_edges):
        a, b = int(a), int(b)  # canonical: a < b, slot 0 leaves a
        if edit.new_vertex >= 0 and (a, b) == parent:
            # split: children duplicate the parent; the new vertex has the
            # highest index so child keys are (a, m) and (b, m)
            m = edit.new_vertex
            for ckey, flip_slots in ((edge_key(a, m), False), (edge_key(b, m), True)):
                ci = new_ids.get(ckey)
                if ci is None:
                    continue
                sl = [1, 0] if flip_slots else [0, 1]
                new.w_raw[ci] = attrs.w_raw[old_i]
                new.frozen[ci] = attrs.frozen[old_i]
                new.l[ci] = attrs.l[old_i, sl]
                new.r[ci] = attrs.r[old_i, sl]
                touched[ci] = True
            continue
        if edit.flipped_to is not None and (a, b) == parent:
            ci = new_ids.get(edit.flipped_to)
            if ci is not None:
                new.w_raw[ci] = attrs.w_raw[old_i]
                new.frozen[ci] = attrs.frozen[old_i]
                new.l[ci] = attrs.l[old_i]
                new.r[ci] = attrs.r[old_i]
                touched[ci] = True
            continue
        na, nb = resolve(a), resolve(b)
        if na == nb:
            continue  # the collapsed edge itself
        ckey = edge_key(na, nb)
        ci = new_ids.get(ckey)
        if ci is None:
            continue
        # orientation: which old endpoint became the lower-indexed new one
        old_lo = a if na == ckey[0] else b
        sl = [0, 1] if old_lo == a else [1, 0]
        if touched[ci]:
            # two old edges merged by a collapse: w by max, frozen only if
            # both were frozen, half-edge features from the survivor (the
            # edge that was incident to the kept vertex before the edit)
            new.w_raw[ci] = max(new.w_raw[ci], attrs.w_raw[old_i])
            new.frozen[ci] = bool(new.frozen[ci] and attrs.frozen[old_i])
            if old_keep in (a, b):
                new.l[ci] = attrs.l[old_i, sl]
                new.r[ci] = attrs.r[old_i, sl]
        else:
            new.w_raw[ci] = attrs.w_raw[old_i]
            new.frozen[ci] = attrs.frozen[old_i]
            new.l[ci] = attrs.l[old_i, sl]
            new.r[ci] = attrs.r[old_i, sl]
            touched[ci] = True
    return new


# ----------------------------------------------------------------------
# plain-text OBJ-style import/export
# ----------------------------------------------------------------------


def save_obj(mesh: Mesh2D, path):
    with open(path, "w") as fh:
        for vx, vy in mesh.vertices:
            fh.write(f"v {vx!r} {vy!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_obj(path) -> Mesh2D:
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "f":
                faces.append(tuple(int(p.split("/")[0]) - 1 for p in parts[1:4]))
    return Mesh2D(np.array(verts), np.array(faces, dtype=np.int32))


# ----------------------------------------------------------------------
# simple constructors used by tests and fixtures
# ----------------------------------------------------------------------


def unit_square_mesh(diagonal="main") -> Mesh2D:
    """Two-triangle unit square; diagonal 'main' joins (0,0)-(1,1)."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    if diagonal == "main":
        faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    else:
        faces = np.array([[0, 1, 3], [1, 2, 3]], dtype=np.int32)
    return Mesh2D(verts, faces)


def grid_mesh(n: int, m: Optional[int] = None) -> Mesh2D:
    """Regular n x m cell grid of the unit square, 2 triangles per cell."""
    if m is None:
        m = n
    xs = np.linspace(0.0, 1.0, n + 1)
    ys = np.linspace(0.0, 1.0, m + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    faces = []
    for i in range(n):
        for j in range(m):
            v00 = i * (m + 1) + j
            v10 = (i + 1) * (m + 1) + j
            v01 = v00 + 1
            v11 = v10 + 1
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return Mesh2D(verts, np.array(faces, dtype=np.int32))
