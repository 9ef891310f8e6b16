"""Mesh initialization: align a triangle mesh with image discontinuities.

Pipeline: Canny edge detection -> 8-connected pixel chains -> simplified
polyline constraints -> conforming constrained Delaunay triangulation with
uniform edge-length refinement -> per-face constant-color proxy fit with a
soft rasterizer and interleaved remeshing (collapse / split / flip passes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.ndimage as ndi
from scipy.spatial import Delaunay as _SciDelaunay

from .geometry import (
    Mesh2D,
    edge_key,
    orient_ccw,
    perp,
    quad_cotan_trace,
    signed_area,
)
from .imgio import TargetImage
from .train import AdamState, VertexPreconditioner, adam_step, derive_rng

# sigma reproducing a 3x3 Gaussian kernel (OpenCV size->sigma convention)
KERNEL3_SIGMA = 0.8


@dataclass
class MeshInitConfig:
    canny_low: float = 100.0
    canny_high: float = 200.0
    presmooth_sigma: Optional[float] = None
    target_edge_len: float = 1e-2
    proxy_epochs: int = 200
    remesh_every: int = 50
    sharpness: float = 0.1  # soft-rasterizer kernel, pixel units
    lambda_boundary: float = 1e-2
    collapse_area_frac: float = 2e-5
    collapse_angle_deg: float = 120.0
    split_loss_threshold: float = 2.0  # per-face integral of sq. residual, px^2 units
    lambda_delaunay: float = 0.5
    lr_vertices: float = 1.0  # pixel units per epoch
    precondition_weight: float = 1.0
    samples_per_pixel_area: float = 1.0
    seed: int = 0


# ----------------------------------------------------------------------
# Canny edge detection
# ----------------------------------------------------------------------


@dataclass
class EdgeMask:
    """Boolean raster of detected discontinuity pixels."""

    mask: np.ndarray  # (H, W) bool

    @property
    def n_positive(self) -> int:
        return int(self.mask.sum())


def canny(image: TargetImage, low=100.0, high=200.0, presmooth_sigma=None) -> EdgeMask:
    """Canny detector: Sobel gradients, non-max suppression, hysteresis.

    Thresholds follow the 8-bit convention (0-255 gradient magnitudes);
    images in [0,1] are rescaled internally.
    """
    gray = image.luma() * 255.0
    if presmooth_sigma:
        gray = ndi.gaussian_filter(gray, presmooth_sigma, mode="nearest")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    gx = ndi.convolve(gray, kx, mode="nearest")
    gy = ndi.convolve(gray, kx.T, mode="nearest")
    mag = np.hypot(gx, gy)
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)

    # non-maximum suppression over the 4 quantized directions
    H, W = mag.shape
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dr, dc):
        return padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]

    sector0 = (ang < 22.5) | (ang >= 157.5)  # horizontal gradient: E/W
    sector1 = (ang >= 22.5) & (ang < 67.5)
    sector2 = (ang >= 67.5) & (ang < 112.5)  # vertical gradient: N/S
    sector3 = (ang >= 112.5) & (ang < 157.5)
    # asymmetric tie-breaking (> vs >=) thins double-wide ridges on
    # perfectly symmetric steps
    keep = np.zeros_like(mag, dtype=bool)
    keep |= sector0 & (mag > shifted(0, 1)) & (mag >= shifted(0, -1))
    keep |= sector1 & (mag > shifted(1, -1)) & (mag >= shifted(-1, 1))
    keep |= sector2 & (mag > shifted(1, 0)) & (mag >= shifted(-1, 0))
    keep |= sector3 & (mag > shifted(1, 1)) & (mag >= shifted(-1, -1))
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = nms >= low
    labels, n = ndi.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return EdgeMask(np.zeros_like(weak))
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    lut = np.zeros(n + 1, dtype=bool)
    lut[keep_labels] = True
    return EdgeMask(lut[labels])


# ----------------------------------------------------------------------
# chain extraction and simplification
# ----------------------------------------------------------------------

_NBRS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def extract_chains(mask: EdgeMask, prune_spur_len: int = 3) -> list:
    """8-connected pixel chains as lists of (row, col), deterministic order.

    Chains run between junction pixels (degree != 2) or close into cycles.
    Dead-end spurs up to ``prune_spur_len`` pixels hanging off junctions are
    removed first (NMS leaves diagonal stubs at corners).
    """
    m = mask.mask
    pset = set(tuple(p) for p in np.argwhere(m))
    if prune_spur_len:
        for _ in range(4):
            if not _prune_spurs_once(pset, prune_spur_len):
                break
    return _chains_of(pset)


def _pixel_neighbors(p, pset):
    """8-neighbors of p, skipping diagonal links made redundant by a shared
    4-neighbor (avoids spurious junction triangles at corners)."""
    out = []
    for dr, dc in _NBRS8:
        q = (p[0] + dr, p[1] + dc)
        if q not in pset:
            continue
        if dr != 0 and dc != 0:
            if (p[0], q[1]) in pset or (q[0], p[1]) in pset:
                continue
        out.append(q)
    return out


def _degree_map(pset):
    return {p: _pixel_neighbors(p, pset) for p in pset}


def _prune_spurs_once(pset, max_len) -> bool:
    adj = _degree_map(pset)
    removed = False
    for p in sorted(pset):
        if p not in pset or len([q for q in adj[p] if q in pset]) != 1:
            continue
        # walk from the dead end until a junction or the length limit
        trail = [p]
        prev = None
        cur = p
        while len(trail) <= max_len:
            nbrs = [q for q in adj.get(cur, []) if q in pset and q != prev]
            if len(nbrs) != 1:
                break
            prev, cur = cur, nbrs[0]
            if len([q for q in adj.get(cur, []) if q in pset]) > 2:
                # spur attached to a junction: drop the dangling pixels
                for t in trail:
                    pset.discard(t)
                removed = True
                break
            trail.append(cur)
    return removed


def _chains_of(pset):
    pix = sorted(pset)
    adj = {p: sorted(_pixel_neighbors(p, pset)) for p in pix}
    visited = set()  # directed pixel pairs
    chains = []

    def walk(start, nxt):
        chain = [start, nxt]
        visited.add((start, nxt))
        visited.add((nxt, start))
        cur, prev = nxt, start
        while len(adj[cur]) == 2 and cur != start:
            a, b = adj[cur]
            step = a if a != prev else b
            if (cur, step) in visited:
                break
            visited.add((cur, step))
            visited.add((step, cur))
            chain.append(step)
            prev, cur = cur, step
        return chain

    endpoints = [p for p in pix if len(adj[p]) != 2]
    for p in endpoints:
        for q in adj[p]:
            if (p, q) not in visited:
                chains.append(walk(p, q))
    # pure cycles: every remaining pixel has degree 2
    for p in pix:
        for q in adj[p]:
            if (p, q) not in visited:
                chains.append(walk(p, q))
    return chains


def chains_to_canvas(chains: list, width: int, height: int) -> list:
    """Pixel chains -> float polylines through pixel centers, canvas units."""
    out = []
    for ch in chains:
        arr = np.array([((c + 0.5) / width, (r + 0.5) / height) for r, c in ch])
        out.append(arr)
    return out


def douglas_peucker(points: np.ndarray, tol: float) -> np.ndarray:
    """Classic polyline simplification with absolute tolerance."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= 2:
        return pts.copy()
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        seg = pts[j] - pts[i]
        L = np.hypot(*seg)
        mid = pts[i + 1 : j]
        if L < 1e-300:
            d = np.hypot(mid[:, 0] - pts[i, 0], mid[:, 1] - pts[i, 1])
        else:
            d = np.abs((mid[:, 0] - pts[i, 0]) * seg[1] - (mid[:, 1] - pts[i, 1]) * seg[0]) / L
        kmax = int(np.argmax(d))
        if d[kmax] > tol:
            k = i + 1 + kmax
            keep[k] = True
            stack.append((i, k))
            stack.append((k, j))
    return pts[keep]


# ----------------------------------------------------------------------
# segment utilities
# ----------------------------------------------------------------------


def _seg_intersection(p0, p1, q0, q1, eps=1e-12):
    """Proper intersection point of two open segments, or None."""
    d1 = p1 - p0
    d2 = q1 - q0
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < eps:
        return None
    dq = q0 - p0
    t = (dq[0] * d2[1] - dq[1] * d2[0]) / den
    s = (dq[0] * d1[1] - dq[1] * d1[0]) / den
    if eps < t < 1 - eps and eps < s < 1 - eps:
        return p0 + t * d1
    return None


def split_intersecting_segments(segments: list) -> list:
    """Split segments at mutual proper intersections (pre-CDT cleanup)."""
    segs = [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for a, b in segments]
    changed = True
    guard = 0
    while changed and guard < 50:
        changed = False
        guard += 1
        out = []
        consumed = [False] * len(segs)
        for i in range(len(segs)):
            if consumed[i]:
                continue
            a0, a1 = segs[i]
            hit = None
            for j in range(i + 1, len(segs)):
                if consumed[j]:
                    continue
                b0, b1 = segs[j]
                x = _seg_intersection(a0, a1, b0, b1)
                if x is not None:
                    hit = (j, x)
                    break
            if hit is None:
                out.append((a0, a1))
                continue
            j, x = hit
            b0, b1 = segs[j]
            consumed[i] = consumed[j] = True
            out.extend([(a0, x), (x, a1), (b0, x), (x, b1)])
            changed = True
        segs = out
    return segs


# ----------------------------------------------------------------------
# constrained Delaunay triangulation with refinement
# ----------------------------------------------------------------------


def _hex_lattice(spacing: float) -> np.ndarray:
    """Hexagonal lattice covering the unit square, plus boundary points."""
    h = spacing
    rows = int(np.ceil(1.0 / (h * np.sqrt(3) / 2))) + 1
    cols = int(np.ceil(1.0 / h)) + 1
    pts = []
    for j in range(rows + 1):
        y = min(j * h * np.sqrt(3) / 2, 1.0)
        off = 0.5 * h if j % 2 else 0.0
        for i in range(cols + 1):
            x = min(i * h + off, 1.0)
            pts.append((x, y))
    # boundary points at the same spacing plus exact corners
    nb = max(2, int(np.ceil(1.0 / h)))
    side = np.linspace(0.0, 1.0, nb + 1)
    for s in side:
        pts.extend([(s, 0.0), (s, 1.0), (0.0, s), (1.0, s)])
    return np.array(pts)


def _dedupe(points: np.ndarray, tol: float) -> np.ndarray:
    """Remove near-duplicate points, keeping first occurrences."""
    if len(points) == 0:
        return points
    scale = max(1.0 / max(tol, 1e-12), 1.0)
    key = np.round(points * scale).astype(np.int64)
    _, idx = np.unique(key[:, 0] * (2**31) + key[:, 1], return_index=True)
    return points[np.sort(idx)]


def _segments_cross(p0, p1, q0, q1, eps=1e-12):
    x = _seg_intersection(p0, p1, q0, q1, eps)
    return x is not None


def _recover_constraint(mesh: Mesh2D, a: int, b: int, max_iter=200) -> bool:
    """Edge-flip recovery of constraint segment (a, b)."""
    for _ in range(max_iter):
        if mesh.edge_id(a, b) >= 0:
            return True
        pa = mesh.vertices[a]
        pb = mesh.vertices[b]
        crossing = []
        for e in range(mesh.n_edges):
            u, v = mesh.edges[e]
            if u in (a, b) or v in (a, b):
                continue
            if _segments_cross(pa, pb, mesh.vertices[u], mesh.vertices[v]):
                crossing.append(e)
        if not crossing:
            return mesh.edge_id(a, b) >= 0
        done_any = False
        for e in crossing:
            res = mesh.flip_edge(e)
            if res.ok:
                done_any = True
                break
        if not done_any:
            return False
    return mesh.edge_id(a, b) >= 0


def triangulate(mask_or_chains, target_edge_len: float, width: int = None,
                height: int = None) -> tuple:
    """Conforming constrained Delaunay triangulation of the unit canvas.

    Accepts an EdgeMask (with width/height for coordinate mapping) or a list
    of canvas-space polylines. Constraint polylines are simplified, split at
    mutual intersections, subdivided to the target length and recovered as
    mesh edges; the rest of the canvas is covered by a hex lattice refined
    until no edge exceeds ``target_edge_len``. Returns (mesh, constraints)
    where constraints is a set of canonical vertex pairs.
    """
    if isinstance(mask_or_chains, EdgeMask):
        if width is None or height is None:
            height, width = mask_or_chains.mask.shape
        chains = chains_to_canvas(extract_chains(mask_or_chains), width, height)
        tol = 1.0 / max(width, height)  # 1 px simplification
        chains = [douglas_peucker(c, tol) for c in chains]
    else:
        chains = [np.asarray(c, dtype=np.float64) for c in mask_or_chains]

    segments = []
    for ch in chains:
        for i in range(len(ch) - 1):
            if np.hypot(*(ch[i + 1] - ch[i])) > 1e-9:
                segments.append((ch[i], ch[i + 1]))
    segments = split_intersecting_segments(segments)

    # subdivide constraints to the target length
    sub_pts = []
    sub_segs = []
    for a, b in segments:
        L = float(np.hypot(*(b - a)))
        n = max(1, int(np.ceil(L / target_edge_len)))
        ts = np.linspace(0.0, 1.0, n + 1)
        chain = a[None] * (1 - ts[:, None]) + b[None] * ts[:, None]
        np.clip(chain, 0.0, 1.0, out=chain)
        for i in range(n):
            sub_segs.append((chain[i], chain[i + 1]))
        sub_pts.append(chain)

    lattice = _hex_lattice(target_edge_len * 0.95)
    pts_list = [np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])]
    if sub_pts:
        pts_list.append(np.vstack(sub_pts))
    con_pts = np.vstack(pts_list[1:]) if sub_pts else np.zeros((0, 2))
    if len(con_pts):
        # cull lattice points crowding the constraints
        from scipy.spatial import cKDTree

        tree = cKDTree(con_pts)
        d, _ = tree.query(lattice)
        lattice = lattice[d > 0.5 * target_edge_len]
    pts_list.append(lattice)
    points = _dedupe(np.vstack(pts_list), tol=1e-7)

    tri = _SciDelaunay(points)
    faces = orient_ccw(points, tri.simplices)
    mesh = Mesh2D(points, faces)

    # constraint segments as canonical vertex pairs (via nearest point lookup)
    from scipy.spatial import cKDTree

    tree = cKDTree(mesh.vertices)
    constraints = set()
    for a, b in sub_segs:
        ia = int(tree.query(a)[1])
        ib = int(tree.query(b)[1])
        if ia == ib:
            continue
        constraints.add(edge_key(ia, ib))
    for (ia, ib) in sorted(constraints):
        _recover_constraint(mesh, ia, ib)
    mesh.delaunay_flip_pass(protected=constraints)

    # refinement: split all edges above the target, restore Delaunay, repeat
    for _ in range(30):
        lens = mesh.edge_lengths()
        too_long = np.flatnonzero(lens > target_edge_len * (1 + 1e-9))
        if len(too_long) == 0:
            break
        keys = [edge_key(*mesh.edges[e]) for e in too_long[np.argsort(-lens[too_long])]]
        for key in keys:
            e = mesh.edge_id(*key)
            if e < 0:
                continue
            if mesh.edge_lengths()[e] <= target_edge_len * (1 + 1e-9):
                continue
            res = mesh.split_edge(e)
            if res.ok and key in constraints:
                constraints.discard(key)
                constraints.update(res.child_edges)
        mesh.delaunay_flip_pass(protected=constraints)
    return mesh, constraints


# ----------------------------------------------------------------------
# per-face constant-color proxy and the soft rasterizer
# ----------------------------------------------------------------------


@dataclass
class ProxyField:
    """Per-face constant colors owned by a mesh."""

    colors: np.ndarray  # (nf, d)


def stratified_face_samples(mesh: Mesh2D, samples_per_area: float, rng):
    """Per-triangle stratified samples; each face gets >= 1 sample.

    Returns (points (n,2), face index (n,)). Stratification uses a per-face
    sqrt-size grid in barycentric square space folded onto the triangle.
    """
    areas = np.abs(mesh.face_areas())
    n_per = np.maximum(1, np.ceil(areas * samples_per_area).astype(np.int64))
    total = int(n_per.sum())
    face_of = np.repeat(np.arange(mesh.n_faces), n_per)
    # stratify in the unit square: grid of ceil(sqrt(n)) cells per face
    g = np.ceil(np.sqrt(n_per)).astype(np.int64)
    g_rep = np.repeat(g, n_per)
    local = np.arange(total) - np.repeat(np.cumsum(n_per) - n_per, n_per)
    u = ((local % g_rep) + rng.random(total)) / g_rep
    v = ((local // g_rep) + rng.random(total)) / g_rep
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[face_of]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, face_of


def face_mean_colors(mesh: Mesh2D, image: TargetImage, pts, face_of) -> np.ndarray:
    """Per-face mean of the sampled target colors (d columns)."""
    d = image.channels
    nf = mesh.n_faces
    colors = np.zeros((nf, d))
    cnt = np.bincount(face_of, minlength=nf).astype(np.float64)
    tgt = image.sample(pts)
    for c in range(d):
        colors[:, c] = np.bincount(face_of, weights=tgt[:, c], minlength=nf)
    colors /= np.maximum(cnt, 1.0)[:, None]
    return colors


def _soft_weights_and_grads(mesh: Mesh2D, pts, face_of, tau: float):
    """Soft face-membership sigma(sd/tau) and d(weight)/d(vertex) factors.

    sd is the signed distance to the face boundary, positive inside; it is
    the minimum over the three edge lines of the sample's face.
    """
    tri = mesh.vertices[mesh.faces[face_of]]  # (n,3,2)
    n = len(pts)
    sds = np.empty((n, 3))
    for i in range(3):
        a = tri[:, i]
        b = tri[:, (i + 1) % 3]
        d = b - a
        L = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-300)
        sds[:, i] = (d[:, 0] * (pts[:, 1] - a[:, 1]) - d[:, 1] * (pts[:, 0] - a[:, 0])) / L
    nearest = np.argmin(sds, axis=1)
    sd = sds[np.arange(n), nearest]
    z = sd / tau
    w = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))
    dw_dsd = w * (1.0 - w) / tau
    return sd, w, dw_dsd, nearest


def _accumulate_softras_vertex_grads(mesh, pts, face_of, nearest, coeff, grad):
    """Scatter coeff * d(sd)/d(vertex) into grad for the nearest edges.

    sd = cross(b - a, x - a)/|b - a| for the face's nearest edge (a, b).
    """
    tri_idx = mesh.faces[face_of]
    n = len(pts)
    ia = tri_idx[np.arange(n), nearest]
    ib = tri_idx[np.arange(n), (nearest + 1) % 3]
    a = mesh.vertices[ia]
    b = mesh.vertices[ib]
    d = b - a
    L = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-300)
    N = d[:, 0] * (pts[:, 1] - a[:, 1]) - d[:, 1] * (pts[:, 0] - a[:, 0])
    # N = (bx-ax)(py-ay) - (by-ay)(px-ax); dL/da = (a-b)/L
    px, py = pts[:, 0], pts[:, 1]
    dN_dax = -(py - a[:, 1]) + (b[:, 1] - a[:, 1])
    dN_day = -(b[:, 0] - a[:, 0]) + (px - a[:, 0])
    dN_dbx = py - a[:, 1]
    dN_dby = -(px - a[:, 0])
    dL_da = (a - b) / L[:, None]
    dL_db = -dL_da
    inv_L = 1.0 / L
    sd = N * inv_L
    ga = np.stack([dN_dax, dN_day], axis=1) * inv_L[:, None] - sd[:, None] * dL_da * inv_L[:, None]
    gb = np.stack([dN_dbx, dN_dby], axis=1) * inv_L[:, None] - sd[:, None] * dL_db * inv_L[:, None]
    np.add.at(grad, ia, coeff[:, None] * ga)
    np.add.at(grad, ib, coeff[:, None] * gb)


# ----------------------------------------------------------------------
# remeshing passes
# ----------------------------------------------------------------------


def _face_max_angles(mesh: Mesh2D) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    angles = np.empty((mesh.n_faces, 3))
    for i in range(3):
        u = tri[:, (i + 1) % 3] - tri[:, i]
        w = tri[:, (i + 2) % 3] - tri[:, i]
        cosang = (u * w).sum(axis=1) / np.maximum(
            np.hypot(u[:, 0], u[:, 1]) * np.hypot(w[:, 0], w[:, 1]), 1e-300
        )
        angles[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return angles.max(axis=1)


def collapse_pass(mesh: Mesh2D, area_frac: float, angle_deg: float, protected=None) -> int:
    """Collapse the shortest edge of degenerate faces, worst first."""
    protected = protected or set()
    done = 0
    guard = mesh.n_faces
    while guard > 0:
        guard -= 1
        areas = np.abs(mesh.face_areas())
        max_ang = _face_max_angles(mesh)
        bad = (areas < area_frac * 1.0) | (max_ang > angle_deg)
        cand = np.flatnonzero(bad)
        if len(cand) == 0:
            break
        # worst face first: smallest area, then widest angle
        order = cand[np.lexsort((-max_ang[cand], areas[cand]))]
        collapsed = False
        for fi in order:
            tri = mesh.faces[fi]
            pairs = [(int(tri[i]), int(tri[(i + 1) % 3])) for i in range(3)]
            lens = [np.hypot(*(mesh.vertices[b] - mesh.vertices[a])) for a, b in pairs]
            for a, b in [p for _, p in sorted(zip(lens, pairs))]:
                if edge_key(a, b) in protected:
                    continue
                e = mesh.edge_id(a, b)
                if e < 0:
                    continue
                res = mesh.collapse_edge(e)
                if res.ok:
                    done += 1
                    collapsed = True
                    break
            if collapsed:
                break
        if not collapsed:
            break
    return done


def split_pass(mesh: Mesh2D, image: TargetImage, colors: np.ndarray, pts, face_of,
               threshold: float, protected=None) -> int:
    """Split the longest edge of faces with high fitting loss.

    Face loss is the integral of the squared residual in pixel-area units:
    area_px * mean ||color - I||^2 over the face's samples.
    """
    px_area = image.width * image.height
    res = image.sample(pts) - colors[face_of]
    sq = (res * res).sum(axis=1)
    nf = mesh.n_faces
    cnt = np.maximum(np.bincount(face_of, minlength=nf), 1)
    mean_sq = np.bincount(face_of, weights=sq, minlength=nf) / cnt
    loss = np.abs(mesh.face_areas()) * px_area * mean_sq
    cand = np.flatnonzero(loss > threshold)
    order = cand[np.argsort(-loss[cand])]
    done = 0
    # face ids shift after each split: work on vertex triplets
    tris = [tuple(int(v) for v in mesh.faces[fi]) for fi in order]
    for tri in tris:
        pairs = [(tri[i], tri[(i + 1) % 3]) for i in range(3)]
        lens = [np.hypot(*(mesh.vertices[b] - mesh.vertices[a])) for a, b in pairs]
        a, b = pairs[int(np.argmax(lens))]
        e = mesh.edge_id(a, b)
        if e < 0:
            continue
        key = edge_key(a, b)
        r = mesh.split_edge(e)
        if r.ok:
            if protected is not None and key in protected:
                protected.discard(key)
                protected.update(r.child_edges)
            done += 1
    return done


def hybrid_flip_pass(mesh: Mesh2D, image: TargetImage, lambda_delaunay: float,
                     samples_per_area: float, rng, protected=None,
                     record=None) -> int:
    """Greedy flips minimizing fit loss + lambda * cotan trace per quad.

    The fitting term is evaluated on a shared per-quad sample set under both
    diagonal configurations (per-face mean colors recomputed per config), in
    pixel-area units to match the split threshold convention.
    """
    protected = protected or set()
    px_area = image.width * image.height
    flips = 0
    for _ in range(3):
        improved = False
        keys = [edge_key(*mesh.edges[i]) for i in range(mesh.n_edges)]
        for key in keys:
            if key in protected:
                continue
            e = mesh.edge_id(*key)
            if e < 0 or mesh.boundary_edge[e]:
                continue
            a, b = (int(x) for x in mesh.edges[e])
            f0, f1 = (int(x) for x in mesh.edge_face[e])
            opp = mesh.opposite_vertices(e)
            if len(opp) != 2 or opp[0] == opp[1]:
                continue
            c, d = opp
            if mesh.edge_id(c, d) >= 0:
                continue
            quad_faces = [tuple(int(v) for v in mesh.faces[f0]),
                          tuple(int(v) for v in mesh.faces[f1])]
            area = sum(abs(signed_area(*[mesh.vertices[v] for v in t])) for t in quad_faces)
            n = max(8, int(np.ceil(area * samples_per_area)))
            pts0, fo0 = _sample_tris(mesh.vertices, quad_faces, n, rng)
            cur = _config_loss(mesh.vertices, quad_faces, pts0, image, px_area)
            cur += lambda_delaunay * quad_cotan_trace(mesh.vertices, quad_faces)
            # flipped configuration: diagonal (c, d)
            alt_faces = [(a, d, c), (d, b, c)]
            if any(
                signed_area(*[mesh.vertices[v] for v in t]) <= 0 for t in alt_faces
            ):
                continue
            alt = _config_loss(mesh.vertices, alt_faces, pts0, image, px_area)
            alt += lambda_delaunay * quad_cotan_trace(mesh.vertices, alt_faces)
            if alt < cur - 1e-12:
                res = mesh.flip_edge(e)
                if res.ok:
                    flips += 1
                    improved = True
                    if record is not None:
                        record.append((cur, alt))
        if not improved:
            break
    return flips


def _sample_tris(vertices, tris, n_total, rng):
    """Uniform samples over a small set of triangles (area-weighted)."""
    areas = np.array([abs(signed_area(*[vertices[v] for v in t])) for t in tris])
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    n_per = np.maximum(1, np.round(n_total * areas / total).astype(np.int64))
    pts = []
    fo = []
    for i, t in enumerate(tris):
        u = rng.random(n_per[i])
        v = rng.random(n_per[i])
        flip = u + v > 1
        u[flip] = 1 - u[flip]
        v[flip] = 1 - v[flip]
        p0, p1, p2 = (np.asarray(vertices[x], dtype=np.float64) for x in t)
        pts.append(p0 + u[:, None] * (p1 - p0) + v[:, None] * (p2 - p0))
        fo.append(np.full(n_per[i], i))
    return np.vstack(pts), np.concatenate(fo)


def _point_in_tri(pts, p0, p1, p2):
    s0 = (p1[0] - p0[0]) * (pts[:, 1] - p0[1]) - (p1[1] - p0[1]) * (pts[:, 0] - p0[0])
    s1 = (p2[0] - p1[0]) * (pts[:, 1] - p1[1]) - (p2[1] - p1[1]) * (pts[:, 0] - p1[0])
    s2 = (p0[0] - p2[0]) * (pts[:, 1] - p2[1]) - (p0[1] - p2[1]) * (pts[:, 0] - p2[0])
    return (s0 >= 0) & (s1 >= 0) & (s2 >= 0)


def _config_loss(vertices, tris, pts, image, px_area):
    """Integral of squared residual vs per-face means for a 2-face config."""
    tgt = image.sample(pts)
    assign = np.full(len(pts), -1, dtype=np.int64)
    for i, t in enumerate(tris):
        p0, p1, p2 = (np.asarray(vertices[x], dtype=np.float64) for x in t)
        inside = _point_in_tri(pts, p0, p1, p2)
        assign[(assign < 0) & inside] = i
    assign[assign < 0] = 0
    total = 0.0
    total_area = sum(abs(signed_area(*[vertices[v] for v in t])) for t in tris)
    n = len(pts)
    for i in range(len(tris)):
        sel = assign == i
        if not np.any(sel):
            continue
        mean = tgt[sel].mean(axis=0)
        res = tgt[sel] - mean
        total += float((res * res).sum())
    # sum over samples -> integral: samples cover total_area uniformly
    return total / max(n, 1) * total_area * px_area


# ----------------------------------------------------------------------
# the proxy fit driver
# ----------------------------------------------------------------------


def snap_boundary(mesh: Mesh2D):
    """Project boundary vertices back onto their canvas sides (in place)."""
    for v in range(mesh.n_vertices):
        if not mesh.boundary_vertex[v]:
            continue
        sides = mesh._canvas_sides(v)
        p = mesh.vertices[v]
        if "x0" in sides:
            p[0] = 0.0
        if "x1" in sides:
            p[0] = 1.0
        if "y0" in sides:
            p[1] = 0.0
        if "y1" in sides:
            p[1] = 1.0
        np.clip(p, 0.0, 1.0, out=p)
    mesh.invalidate_geometry()


def proxy_fit(mesh: Mesh2D, image: TargetImage, config: MeshInitConfig,
              constraints=None, history=None) -> Mesh2D:
    """Deform the mesh so per-face constant colors approximate the image.

    Minimizes the soft-rasterized fitting term plus the boundary soft
    constraint; per-face colors are reset to the face mean every epoch.
    Remeshing (collapse, split, flips) runs every ``remesh_every`` epochs.
    """
    W, H = image.width, image.height
    tau = config.sharpness / max(W, H)
    lr = config.lr_vertices / max(W, H)
    samples_per_area = config.samples_per_pixel_area * W * H
    constraints = set() if constraints is None else constraints

    state = AdamState()
    precond = VertexPreconditioner(mesh, config.precondition_weight)

    def renew_precond():
        nonlocal precond, state
        precond = VertexPreconditioner(mesh, config.precondition_weight)
        state = AdamState()  # vertex count changed; restart moments

    for epoch in range(config.proxy_epochs):
        rng = derive_rng(config.seed, 5, epoch)
        pts, face_of = stratified_face_samples(mesh, samples_per_area, rng)
        colors = face_mean_colors(mesh, image, pts, face_of)
        res = image.sample(pts) - colors[face_of]
        sq = (res * res).sum(axis=1)
        sd, wgt, dw_dsd, nearest = _soft_weights_and_grads(mesh, pts, face_of, tau)

        grad = np.zeros_like(mesh.vertices)
        # d/dv sum w(sd) * sq  (colors detached), normalized per unit area
        coeff = dw_dsd * sq / max(len(pts), 1)
        _accumulate_softras_vertex_grads(mesh, pts, face_of, nearest, coeff, grad)

        bnd = np.flatnonzero(mesh.boundary_vertex)
        nb = max(len(bnd), 1)
        grad[bnd] += (
            2.0 * config.lambda_boundary / nb * (mesh.vertices[bnd] - mesh.initial_positions[bnd])
        )

        grad = precond.apply(grad)
        state.t += 1
        old = mesh.vertices.copy()
        adam_step(mesh.vertices, grad, state, "v", lr)
        step = mesh.vertices - old
        for _ in range(24):
            mesh.invalidate_geometry()
            if np.all(mesh.face_areas() > 0):
                break
            step *= 0.5
            mesh.vertices[:] = old + step
        else:
            mesh.vertices[:] = old
        mesh.invalidate_geometry()

        if history is not None:
            loss = float((wgt * sq).sum() / max(len(pts), 1))
            history.append({"epoch": epoch, "proxy_loss": loss, "n_faces": mesh.n_faces})

        if config.remesh_every and (epoch + 1) % config.remesh_every == 0:
            rng_r = derive_rng(config.seed, 6, epoch)
            collapse_pass(mesh, config.collapse_area_frac, config.collapse_angle_deg,
                          protected=constraints)
            pts2, fo2 = stratified_face_samples(mesh, samples_per_area, rng_r)
            colors2 = face_mean_colors(mesh, image, pts2, fo2)
            split_pass(mesh, image, colors2, pts2, fo2, config.split_loss_threshold,
                       protected=constraints)
            mesh.delaunay_flip_pass(protected=constraints)
            hybrid_flip_pass(mesh, image, config.lambda_delaunay, samples_per_area,
                             rng_r, protected=constraints)
            renew_precond()

    snap_boundary(mesh)
    if not np.all(mesh.face_areas() > 0):
        # rare: snapping inverted a sliver; collapse them away
        collapse_pass(mesh, config.collapse_area_frac, config.collapse_angle_deg,
                      protected=constraints)
        snap_boundary(mesh)
    return mesh


def initialize_mesh(image: TargetImage, config: MeshInitConfig, history=None) -> Mesh2D:
    """Full initialization: Canny -> CDT -> proxy fit."""
    mask = canny(image, config.canny_low, config.canny_high, config.presmooth_sigma)
    mesh, constraints = triangulate(mask, config.target_edge_len,
                                    width=image.width, height=image.height)
    mesh.initial_positions = mesh.vertices.copy()
    proxy_fit(mesh, image, config, constraints=constraints, history=history)
    return mesh
