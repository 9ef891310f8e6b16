"""Discontinuous feature field over a triangle mesh with an MLP head.

Every mesh edge carries a gated feature jump: the half-edges of edge (i,j)
store left/right features l, r in R^k, the edge stores a raw weight
reparameterized as w = sigmoid(10*w_raw), and each vertex stores a bias
b in R^k. A query point x inside a face blends the three corner vertices'
local features

    Fhat_i(x) = b_i + sum_j w_ij * ((l_ij - r_ij) * t_i^j(x) + r_ij)

barycentrically and feeds the result to a small tanh MLP. Crossing edge
(i,j) wraps t_i^j between 0 and 1, so the field value jumps by an amount
controlled by w*(l-r); edges frozen by rounding contribute nothing and are
exactly continuous.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .geometry import Mesh2D, RADIUS_EPS, TWO_PI

MAGIC = b"JFLD"
FORMAT_VERSION = 1

HIDDEN_2D = (128, 128)
HIDDEN_1D = (64, 64)
DEFAULT_K = 8


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ----------------------------------------------------------------------
# MLP
# ----------------------------------------------------------------------


@dataclass
class MlpParams:
    """Fully-connected net R^k -> R^d, tanh hidden layers, linear output."""

    weights: list
    biases: list

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    @classmethod
    def create(cls, k: int, d: int, hidden=HIDDEN_2D, rng=None, dtype=np.float32):
        """Xavier-normal weights, zero biases."""
        rng = rng or np.random.default_rng(0)
        dims = [k, *hidden, d]
        weights = []
        biases = []
        for a, b in zip(dims[:-1], dims[1:]):
            std = np.sqrt(2.0 / (a + b))
            weights.append((rng.standard_normal((a, b)) * std).astype(dtype))
            biases.append(np.zeros(b, dtype=dtype))
        return cls(weights, biases)


def mlp_forward(x, mlp: MlpParams, want_cache=False):
    """Forward pass for a batch (n, k) -> (n, d)."""
    x = np.atleast_2d(x)
    h = x
    cache = [h]
    n = mlp.n_layers
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        h = np.tanh(z) if i < n - 1 else z
        if want_cache:
            cache.append(h)
    return (h, cache) if want_cache else h


def mlp_backward(cache, mlp: MlpParams, dout):
    """Backprop through the cached forward pass.

    Returns (dx, MlpParams-of-gradients); gradients match the layout of the
    parameters so optimizers can treat them uniformly.
    """
    dW = [None] * mlp.n_layers
    db = [None] * mlp.n_layers
    grad = np.atleast_2d(dout)
    for i in range(mlp.n_layers - 1, -1, -1):
        h_in = cache[i]
        if i < mlp.n_layers - 1:
            h_out = cache[i + 1]
            grad = grad * (1.0 - h_out * h_out)
        dW[i] = h_in.T @ grad
        db[i] = grad.sum(axis=0)
        grad = grad @ mlp.weights[i].T
    return grad, MlpParams(dW, db)


# ----------------------------------------------------------------------
# 2D field model
# ----------------------------------------------------------------------


class FieldModel:
    """Mesh + per-half-edge features + per-edge weights + MLP.

    ``dtype`` controls the feature/MLP precision: float32 is the shipped
    default, float64 is used by gradient-check fixtures. Geometry is always
    float64.
    """

    def __init__(self, mesh: Mesh2D, k=DEFAULT_K, d=3, hidden=HIDDEN_2D, rng=None,
                 dtype=np.float32, background=None):
        self.mesh = mesh
        self.k = int(k)
        self.d = int(d)
        self.dtype = np.dtype(dtype).type
        ne, nv = mesh.n_edges, mesh.n_vertices
        self.w_raw = np.zeros(ne, dtype=self.dtype)
        self.l = np.zeros((ne, 2, k), dtype=self.dtype)
        self.r = np.zeros((ne, 2, k), dtype=self.dtype)
        self.bias = np.zeros((nv, k), dtype=self.dtype)
        self.frozen = np.zeros(ne, dtype=bool)
        self.mlp = MlpParams.create(k, d, hidden=hidden, rng=rng, dtype=self.dtype)
        self.background = (
            np.zeros(d) if background is None else np.asarray(background, dtype=np.float64)
        )
        self.config_blob = ""

    # -- derived quantities ------------------------------------------------

    def gate(self) -> np.ndarray:
        """Effective per-edge weight: sigmoid(10 w_raw), 0 on frozen edges."""
        g = sigmoid(10.0 * self.w_raw.astype(np.float64))
        g[self.frozen] = 0.0
        return g.astype(self.dtype)

    def discontinuity_indicator(self) -> np.ndarray:
        """Per-edge D: max |w (l - r)| over half-edges and dimensions."""
        jump = np.abs(self.l.astype(np.float64) - self.r.astype(np.float64))
        g = sigmoid(10.0 * self.w_raw.astype(np.float64))
        g[self.frozen] = 0.0
        return g * jump.max(axis=(1, 2))

    def check_consistency(self):
        ne, nv = self.mesh.n_edges, self.mesh.n_vertices
        assert self.w_raw.shape == (ne,)
        assert self.l.shape == (ne, 2, self.k)
        assert self.r.shape == (ne, 2, self.k)
        assert self.frozen.shape == (ne,)
        assert self.bias.shape == (nv, self.k)
        assert self.mlp.in_dim == self.k and self.mlp.out_dim == self.d
        return True

    def copy(self) -> "FieldModel":
        m = FieldModel.__new__(FieldModel)
        m.mesh = self.mesh
        m.k, m.d, m.dtype = self.k, self.d, self.dtype
        m.w_raw = self.w_raw.copy()
        m.l = self.l.copy()
        m.r = self.r.copy()
        m.bias = self.bias.copy()
        m.frozen = self.frozen.copy()
        m.mlp = self.mlp.copy()
        m.background = self.background.copy()
        m.config_blob = self.config_blob
        return m

    # -- evaluation ----------------------------------------------------------

    def edge_axis_angles(self) -> np.ndarray:
        """(ne, 2) polar-axis angle of each half-edge (slot 0 leaves lo)."""
        v = self.mesh.vertices
        e = self.mesh.edges
        d = v[e[:, 1]] - v[e[:, 0]]
        th = np.arctan2(d[:, 1], d[:, 0])
        return np.stack([th, np.mod(th + np.pi, TWO_PI)], axis=1)

    def features(self, face, lam, pts, want_cache=False):
        """Pre-MLP feature F(x) for located points (vectorized).

        face (n,) containing face ids, lam (n,3) barycentric weights,
        pts (n,2) the points themselves (needed for the polar angles).
        """
        mesh = self.mesh
        n = len(pts)
        if n == 0:
            empty = np.zeros((0, self.k), dtype=self.dtype)
            return (empty, None) if want_cache else empty
        vid = mesh.faces[face]  # (n,3)
        q_v = vid.ravel().astype(np.int64)  # (3n,)
        pts3 = np.repeat(pts, 3, axis=0)

        dvec = pts3 - mesh.vertices[q_v]
        rad = np.hypot(dvec[:, 0], dvec[:, 1])
        theta_x = np.arctan2(dvec[:, 1], dvec[:, 0])
        degenerate = rad < RADIUS_EPS

        cnt = (mesh.ring_ptr[q_v + 1] - mesh.ring_ptr[q_v]).astype(np.int64)
        total = int(cnt.sum())
        row_q = np.repeat(np.arange(3 * n), cnt)
        offs = np.repeat(mesh.ring_ptr[q_v], cnt) + (
            np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        )
        r_edge = mesh.ring_edge[offs].astype(np.int64)
        r_slot = mesh.ring_slot[offs].astype(np.int64)
        r_nbr = mesh.ring_nbr[offs].astype(np.int64)

        axis = self.edge_axis_angles()
        t = np.mod((theta_x[row_q] - axis[r_edge, r_slot]) / TWO_PI, 1.0)
        # measure-zero fallback: query on top of the center vertex
        t[degenerate[row_q]] = 0.0
        t = t.astype(self.dtype)

        gate = self.gate()[r_edge]  # (R,) dtype
        de = r_edge * 2 + r_slot
        l_rows = self.l.reshape(-1, self.k)[de]
        r_rows = self.r.reshape(-1, self.k)[de]
        delta = l_rows - r_rows
        contrib = gate[:, None] * (delta * t[:, None] + r_rows)

        starts = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        fhat = np.add.reduceat(contrib, starts, axis=0)
        fhat += self.bias[q_v]
        fhat3 = fhat.reshape(n, 3, self.k)

        lam_t = lam.astype(self.dtype)
        F = np.einsum("nc,nck->nk", lam_t, fhat3)
        if not want_cache:
            return F
        cache = {
            "face": face, "lam": lam_t, "pts": pts, "vid": vid, "q_v": q_v,
            "row_q": row_q, "cnt": cnt, "starts": starts, "r_edge": r_edge,
            "r_slot": r_slot, "r_nbr": r_nbr, "de": de, "t": t, "gate": gate,
            "delta": delta, "r_rows": r_rows, "fhat3": fhat3,
            "dvec": dvec, "rad2": np.maximum(rad * rad, 1e-300),
        }
        return F, cache

    def infer_batch(self, pts, outside="background"):
        """Field values at canvas points (n,2) -> (n,d).

        Points outside the mesh get the background color ('background') or
        raise ('error').
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        face, lam = self.mesh.locate(pts)
        inside = face >= 0
        if not np.all(inside) and outside == "error":
            from .geometry import OutsideDomainError

            raise OutsideDomainError("query outside mesh domain")
        out = np.empty((len(pts), self.d), dtype=np.float64)
        out[~inside] = self.background
        if np.any(inside):
            F = self.features(face[inside], lam[inside], pts[inside])
            out[inside] = mlp_forward(F, self.mlp).astype(np.float64)
        return out

    def infer(self, x, outside="background"):
        return self.infer_batch(np.asarray(x, dtype=np.float64)[None], outside=outside)[0]

    def local_feature(self, x, v_i: int) -> np.ndarray:
        """Fhat_{v_i}(x): the one-ring local feature of a single vertex."""
        x = np.asarray(x, dtype=np.float64)
        mesh = self.mesh
        edges_, slots, _ = mesh.vertex_ring_edges(v_i)
        gate = self.gate()
        acc = self.bias[v_i].astype(np.float64).copy()
        for e, s in zip(edges_, slots):
            nbr = mesh.edges[e, 1 - s]
            t = mesh.local_polar_t(x, v_i, int(nbr))
            l = self.l[e, s].astype(np.float64)
            r = self.r[e, s].astype(np.float64)
            acc += gate[e] * ((l - r) * t + r)
        return acc

    def interpolate_feature(self, x) -> np.ndarray:
        """Barycentric blend of the three corner local features at x."""
        x = np.asarray(x, dtype=np.float64)
        face, lam = self.mesh.locate(x[None])
        if face[0] < 0:
            from .geometry import OutsideDomainError

            raise OutsideDomainError(f"{x} outside mesh domain")
        return self.features(face[:1], lam[:1], x[None])[0].astype(np.float64)

    # -- gradient support ------------------------------------------------------

    def features_backward(self, cache, dF, want_vertex_grads=False):
        """Backprop dL/dF into parameter gradient arrays.

        Returns dict with 'l', 'r', 'w_raw', 'bias' and optionally 'vertices'
        accumulators shaped like the parameters.
        """
        mesh = self.mesh
        n = len(cache["pts"])
        k = self.k
        dF = dF.astype(self.dtype)
        lam = cache["lam"]
        fhat3 = cache["fhat3"]

        dfhat = (lam[:, :, None] * dF[:, None, :]).reshape(3 * n, k)

        nv = mesh.n_vertices
        q_v = cache["q_v"]
        dbias = np.zeros((nv, k), dtype=np.float64)
        for j in range(k):
            dbias[:, j] = np.bincount(q_v, weights=dfhat[:, j].astype(np.float64), minlength=nv)

        row_q = cache["row_q"]
        drow = dfhat[row_q]  # (R,k)
        t = cache["t"]
        gate = cache["gate"]
        delta = cache["delta"]
        r_rows = cache["r_rows"]
        de = cache["de"]
        n_de = mesh.n_edges * 2

        gl = (gate * t)[:, None] * drow
        gr = (gate * (1.0 - t))[:, None] * drow
        dl = np.zeros((n_de, k), dtype=np.float64)
        dr = np.zeros((n_de, k), dtype=np.float64)
        for j in range(k):
            dl[:, j] = np.bincount(de, weights=gl[:, j].astype(np.float64), minlength=n_de)
            dr[:, j] = np.bincount(de, weights=gr[:, j].astype(np.float64), minlength=n_de)

        dgate_rows = np.einsum("rk,rk->r", drow, delta * t[:, None] + r_rows).astype(np.float64)
        dgate = np.bincount(cache["r_edge"], weights=dgate_rows, minlength=mesh.n_edges)
        w = sigmoid(10.0 * self.w_raw.astype(np.float64))
        dw_raw = dgate * 10.0 * w * (1.0 - w)
        dw_raw[self.frozen] = 0.0

        grads = {
            "l": dl.reshape(mesh.n_edges, 2, k),
            "r": dr.reshape(mesh.n_edges, 2, k),
            "w_raw": dw_raw,
            "bias": dbias,
        }
        if not want_vertex_grads:
            return grads

        # smooth dependence of the field on vertex positions: through the
        # polar coordinates t (center and neighbor angles) and through the
        # barycentric weights
        dvert = np.zeros((nv, 2), dtype=np.float64)
        dt_rows = (gate * np.einsum("rk,rk->r", drow, delta)).astype(np.float64)

        # t = (theta_x - theta_axis)/2pi: center angle term
        dtheta_x = np.add.reduceat(dt_rows, cache["starts"]) / TWO_PI  # per (3n,)
        dvec = cache["dvec"]
        rad2 = cache["rad2"]
        gx = dtheta_x * (dvec[:, 1] / rad2)
        gy = dtheta_x * (-dvec[:, 0] / rad2)
        # d theta_x / d v_center = -perp(x - v)/|x-v|^2 = (dy, -dx)/r^2
        np.add.at(dvert[:, 0], q_v, gx)
        np.add.at(dvert[:, 1], q_v, gy)

        # axis angle term: theta_axis = atan2(u - v); d/dv = -perp(u-v)/L^2,
        # d/du = +perp(u-v)/L^2; dt/dtheta_axis = -1/2pi
        r_nbr = cache["r_nbr"]
        uv = mesh.vertices[r_nbr] - mesh.vertices[q_v[row_q]]
        L2 = np.maximum(uv[:, 0] ** 2 + uv[:, 1] ** 2, 1e-300)
        dax = -dt_rows / TWO_PI
        px = -uv[:, 1] / L2
        py = uv[:, 0] / L2
        np.add.at(dvert[:, 0], q_v[row_q], dax * (-px))
        np.add.at(dvert[:, 1], q_v[row_q], dax * (-py))
        np.add.at(dvert[:, 0], r_nbr, dax * px)
        np.add.at(dvert[:, 1], r_nbr, dax * py)

        # barycentric term
        face = cache["face"]
        minv = mesh.face_inverse_jacobians()[face]  # (n,2,2)
        dlam1 = np.einsum("nk,nk->n", dF, (fhat3[:, 1] - fhat3[:, 0])).astype(np.float64)
        dlam2 = np.einsum("nk,nk->n", dF, (fhat3[:, 2] - fhat3[:, 0])).astype(np.float64)
        g = np.stack([dlam1, dlam2], axis=1)  # (n,2)
        mtg = np.einsum("nji,nj->ni", minv, g)  # M^-T g
        lam1 = lam[:, 1].astype(np.float64)
        lam2 = lam[:, 2].astype(np.float64)
        vid = cache["vid"]
        c0 = (lam1 + lam2 - 1.0)[:, None] * mtg
        c1 = (-lam1)[:, None] * mtg
        c2 = (-lam2)[:, None] * mtg
        for col, cg in ((0, c0), (1, c1), (2, c2)):
            np.add.at(dvert[:, 0], vid[:, col], cg[:, 0])
            np.add.at(dvert[:, 1], vid[:, col], cg[:, 1])
        grads["vertices"] = dvert
        return grads


# ----------------------------------------------------------------------
# discontinuity indicator per single edge (spec surface)
# ----------------------------------------------------------------------


def discontinuity_indicator(model: FieldModel, e: int) -> float:
    """Max absolute gated feature jump |w (l - r)| across edge e."""
    return float(model.discontinuity_indicator()[e])


def render_field(model: FieldModel, width: int, height: int, region=None,
                 spp_grid: int = 4) -> np.ndarray:
    """Render the field to an (H, W, d) raster with grid subpixel samples.

    ``region`` is an axis-aligned (x0, y0, x1, y1) canvas sub-rectangle
    (defaults to the full canvas); each output pixel averages an
    spp_grid x spp_grid deterministic subpixel grid. Values are clamped to
    [0,1] at write time; out-of-domain samples get the background color.
    """
    if region is None:
        region = (0.0, 0.0, 1.0, 1.0)
    x0, y0, x1, y1 = (float(v) for v in region)
    s = spp_grid
    off = (np.arange(s) + 0.5) / s
    img = np.zeros((height, width, model.d))
    # pixel (r, c) covers [c, c+1) x [r, r+1) of the output grid mapped onto
    # the region; evaluate in row blocks to bound memory
    xs = x0 + (np.arange(width)[:, None] + off[None, :]) * (x1 - x0) / width  # (W, s)
    block = max(1, int(2_000_000 / max(width * s * s, 1)))
    for r0 in range(0, height, block):
        rows = np.arange(r0, min(r0 + block, height))
        ys = y0 + (rows[:, None] + off[None, :]) * (y1 - y0) / height  # (R, s)
        gx = np.broadcast_to(xs[None, :, :, None], (len(rows), width, s, s))
        gy = np.broadcast_to(ys[:, None, None, :], (len(rows), width, s, s))
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        vals = model.infer_batch(pts)
        img[rows[0] : rows[-1] + 1] = vals.reshape(len(rows), width, s * s, model.d).mean(axis=2)
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def save_model(model: FieldModel, path):
    buf = io.BytesIO()
    mesh = model.mesh
    blob = model.config_blob.encode("utf-8")
    buf.write(MAGIC)
    buf.write(
        struct.pack(
            "<IIIQQQQ",
            FORMAT_VERSION,
            model.k,
            model.d,
            mesh.n_vertices,
            mesh.n_faces,
            mesh.n_edges,
            model.mlp.n_layers,
        )
    )
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(mesh.vertices.astype("<f8").tobytes())
    buf.write(mesh.initial_positions.astype("<f8").tobytes())
    buf.write(mesh.faces.astype("<i4").tobytes())
    buf.write(model.w_raw.astype("<f4").tobytes())
    buf.write(model.l.astype("<f4").tobytes())
    buf.write(model.r.astype("<f4").tobytes())
    buf.write(model.bias.astype("<f4").tobytes())
    buf.write(model.frozen.astype(np.uint8).tobytes())
    for w, b in zip(model.mlp.weights, model.mlp.biases):
        buf.write(struct.pack("<II", w.shape[0], w.shape[1]))
        buf.write(w.astype("<f4").tobytes())
        buf.write(b.astype("<f4").tobytes())
    buf.write(model.background.astype("<f8").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path) -> FieldModel:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MAGIC:
        raise ValueError("not a field model file")
    version, k, d, nv, nf, ne, n_layers = struct.unpack("<IIIQQQQ", buf.read(4 * 3 + 8 * 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (blob_len,) = struct.unpack("<Q", buf.read(8))
    blob = buf.read(blob_len).decode("utf-8")

    def arr(dtype, count, shape):
        nbytes = np.dtype(dtype).itemsize * count
        return np.frombuffer(buf.read(nbytes), dtype=dtype).reshape(shape).copy()

    vertices = arr("<f8", nv * 2, (nv, 2))
    initial = arr("<f8", nv * 2, (nv, 2))
    faces = arr("<i4", nf * 3, (nf, 3))
    mesh = Mesh2D(vertices, faces, initial_positions=initial)
    if mesh.n_edges != ne:
        raise ValueError("corrupt model: edge count mismatch")
    model = FieldModel.__new__(FieldModel)
    model.mesh = mesh
    model.k, model.d = int(k), int(d)
    model.dtype = np.float32
    model.w_raw = arr("<f4", ne, (ne,))
    model.l = arr("<f4", ne * 2 * k, (ne, 2, k))
    model.r = arr("<f4", ne * 2 * k, (ne, 2, k))
    model.bias = arr("<f4", nv * k, (nv, k))
    model.frozen = arr(np.uint8, ne, (ne,)).astype(bool)
    weights = []
    biases = []
    for _ in range(n_layers):
        a, b = struct.unpack("<II", buf.read(8))
        weights.append(arr("<f4", a * b, (a, b)))
        biases.append(arr("<f4", b, (b,)))
    model.mlp = MlpParams(weights, biases)
    model.background = arr("<f8", d, (d,))
    model.config_blob = blob
    return model


# ----------------------------------------------------------------------
# 1D demonstration field (closed polyline on the unit circle)
# ----------------------------------------------------------------------


class Field1D:
    """Per-vertex discontinuous field on S^1, parameterized by arc in [0,1).

    Vertices sit at arc positions ``positions``; each carries w_i (plain,
    no sigmoid), l_i, r_i in R^k; ``bias`` is a single global vector.
    """

    def __init__(self, positions, k=2, d=1, hidden=HIDDEN_1D, rng=None):
        self.positions = np.asarray(positions, dtype=np.float64) % 1.0
        n = len(self.positions)
        self.k, self.d = int(k), int(d)
        self.w = np.zeros(n, dtype=np.float64)
        self.l = np.zeros((n, k), dtype=np.float64)
        self.r = np.zeros((n, k), dtype=np.float64)
        self.bias = np.zeros(k, dtype=np.float64)
        self.mlp = MlpParams.create(k, d, hidden=hidden, rng=rng, dtype=np.float64)

    def t(self, x) -> np.ndarray:
        """(n_vertices,) local coordinates of scalar/array x, each in [0,1)."""
        x = np.asarray(x, dtype=np.float64)
        return np.mod(x[..., None] - self.positions, 1.0)

    def features(self, x) -> np.ndarray:
        t = self.t(x)
        return self.bias + np.einsum(
            "...i,ik->...k", t * self.w, (self.l - self.r)
        ) + (self.w[:, None] * self.r).sum(axis=0)

    def eval(self, x) -> np.ndarray:
        """Field value(s) at arc position(s) x."""
        F = self.features(np.asarray(x, dtype=np.float64))
        return mlp_forward(np.atleast_2d(F), self.mlp).reshape(np.shape(x) + (self.d,))


def field1d_eval(model: Field1D, x):
    return model.eval(x)
