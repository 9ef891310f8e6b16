"""Joint optimization of field parameters and mesh vertex positions.

The loss is the interior L2 fitting term plus a sparsity term on gated
feature jumps,

    L = mean_x ||f(x) - I(x)||^2
      + lambda_discont * sum_halfedges |e| * ||w (l - r)||_1.

Interior samples give gradients for all field parameters plus the smooth
dependence of f on vertex positions (through the local polar coordinates
and the barycentric weights); the discontinuous dependence is estimated by
edge-sampling Monte Carlo: points sampled on candidate edges contribute the
two-sided loss jump along the edge normal to the endpoint vertices.
Vertex gradients are smoothed by a large-step preconditioner
(I + w L)^-1 with the combinatorial graph Laplacian before the Adam step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import Field1D, FieldModel, MlpParams, mlp_backward, mlp_forward, sigmoid
from .geometry import Mesh2D, perp
from .imgio import TargetImage


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic child stream for (seed, tags)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags)))


@dataclass
class TrainConfig:
    epochs_interior_only: int = 70
    epochs_joint: int = 130
    epochs_post_round: int = 200
    spp_interior: int = 4
    edge_samples_per_pixel: float = 16.0
    lambda_discont: float = 5e-3
    lr_vertices: float = 1.0  # in pixel units per epoch; divided by max(W,H)
    lr_field: float = 2e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    precondition_weight: float = 0.5
    importance_multiplier: float = 5.0
    importance_threshold: float = 0.02  # beta
    seed: int = 0

    def validate(self):
        for name in (
            "epochs_interior_only",
            "epochs_joint",
            "epochs_post_round",
            "spp_interior",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_field <= 0 or self.lr_vertices < 0:
            raise ValueError("learning rates must be positive")
        return self


class FitAbort(RuntimeError):
    """Raised when the loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class FitReport:
    """Per-epoch records plus rounding decisions and final metrics."""

    epochs: list = dc_field(default_factory=list)
    rounding: list = dc_field(default_factory=list)
    final: dict = dc_field(default_factory=dict)

    def add_epoch(self, **rec):
        self.epochs.append(rec)

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.epochs:
            lines.append(json.dumps({"type": "epoch", **rec}, sort_keys=True))
        for rec in self.rounding:
            lines.append(json.dumps({"type": "rounding", **rec}, sort_keys=True))
        if self.final:
            lines.append(json.dumps({"type": "final", **self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "FitReport":
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "epoch":
                rep.epochs.append(rec)
            elif kind == "rounding":
                rep.rounding.append(rec)
            elif kind == "final":
                rep.final = rec
        return rep

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


# ----------------------------------------------------------------------
# gradient buffers and Adam
# ----------------------------------------------------------------------


class GradBuffers:
    """Accumulators matching every FieldModel parameter plus vertices."""

    def __init__(self, model: FieldModel):
        mesh = model.mesh
        self.l = np.zeros((mesh.n_edges, 2, model.k))
        self.r = np.zeros((mesh.n_edges, 2, model.k))
        self.w_raw = np.zeros(mesh.n_edges)
        self.bias = np.zeros((mesh.n_vertices, model.k))
        self.mlp = MlpParams(
            [np.zeros_like(w, dtype=np.float64) for w in model.mlp.weights],
            [np.zeros_like(b, dtype=np.float64) for b in model.mlp.biases],
        )
        self.vertices = np.zeros((mesh.n_vertices, 2))
        self.n_interior = 0
        self.n_edge = 0

    def zero_(self):
        for a in (self.l, self.r, self.w_raw, self.bias, self.vertices):
            a.fill(0.0)
        for a in self.mlp.weights + self.mlp.biases:
            a.fill(0.0)
        self.n_interior = 0
        self.n_edge = 0

    def assert_finite(self):
        for a in (self.l, self.r, self.w_raw, self.bias, self.vertices):
            if not np.all(np.isfinite(a)):
                raise FitAbort("non-finite gradient")


class AdamState:
    """Bias-corrected Adam moments for a named set of arrays."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0

    def ensure(self, name, arr):
        if name not in self.m:
            self.m[name] = np.zeros_like(arr, dtype=np.float64)
            self.v[name] = np.zeros_like(arr, dtype=np.float64)


def adam_step(params, grad, state: AdamState, name, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; ``state.t`` must be advanced by the caller."""
    state.ensure(name, params)
    m, v = state.m[name], state.v[name]
    g = np.asarray(grad, dtype=np.float64)
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    t = max(state.t, 1)
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    upd = lr * mhat / (np.sqrt(vhat) + eps)
    params -= upd.astype(params.dtype)
    return params


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def stratified_subpixel_samples(width, height, spp, rng):
    """(W*H*spp, 2) jittered sample positions; spp a perfect square uses an
    s x s stratified sub-grid per pixel, otherwise spp uniforms per pixel."""
    s = int(round(np.sqrt(spp)))
    n_pix = width * height
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    base = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    if s * s == spp:
        ox, oy = np.meshgrid(np.arange(s), np.arange(s))
        offsets = np.stack([ox.ravel(), oy.ravel()], axis=1) / s
        pts = base[:, None, :] + offsets[None, :, :] + rng.random((n_pix, spp, 2)) / s
    else:
        pts = base[:, None, :] + rng.random((n_pix, spp, 2))
    pts = pts.reshape(-1, 2)
    pts[:, 0] /= width
    pts[:, 1] /= height
    return pts


def loss_interior(model: FieldModel, image: TargetImage, samples, buffers: GradBuffers = None,
                  want_vertex_grads=False):
    """Mean squared error between infer(x) and I(x) over the samples.

    Accumulates parameter gradients (and, when requested, the smooth part
    of the vertex gradients) into ``buffers``. Samples outside the mesh are
    skipped; they count toward the mean as zero residual.
    """
    pts = np.asarray(samples, dtype=np.float64)
    n = len(pts)
    face, lam = model.mesh.locate(pts)
    inside = face >= 0
    pts_in = pts[inside]
    tgt = image.sample(pts_in)
    if buffers is None:
        F = model.features(face[inside], lam[inside], pts_in)
        out = mlp_forward(F, model.mlp).astype(np.float64)
        res = out - tgt
        return float(np.sum(res * res) / n), int(inside.sum())
    F, cache = model.features(face[inside], lam[inside], pts_in, want_cache=True)
    out, mcache = mlp_forward(F, model.mlp, want_cache=True)
    res = out.astype(np.float64) - tgt
    loss = float(np.sum(res * res) / n)
    dout = (2.0 / n) * res
    dF, mlp_g = mlp_backward(mcache, model.mlp, dout.astype(model.dtype))
    grads = model.features_backward(cache, dF, want_vertex_grads=want_vertex_grads)
    buffers.l += grads["l"]
    buffers.r += grads["r"]
    buffers.w_raw += grads["w_raw"]
    buffers.bias += grads["bias"]
    for i in range(model.mlp.n_layers):
        buffers.mlp.weights[i] += mlp_g.weights[i].astype(np.float64)
        buffers.mlp.biases[i] += mlp_g.biases[i].astype(np.float64)
    if want_vertex_grads:
        buffers.vertices += grads["vertices"]
    buffers.n_interior += int(inside.sum())
    return loss, int(inside.sum())


def loss_sparsity(model: FieldModel, buffers: GradBuffers = None, scale=1.0,
                  want_vertex_grads=False):
    """Sum over half-edges of |e| * ||w (l - r)||_1 (unscaled value returned).

    The L1 subgradient at exact zeros is zero, which keeps rounded edges
    stationary.
    """
    mesh = model.mesh
    lens = mesh.edge_lengths()
    g = model.gate().astype(np.float64)
    delta = model.l.astype(np.float64) - model.r.astype(np.float64)  # (ne,2,k)
    l1 = np.abs(delta).sum(axis=2)  # (ne,2)
    per_edge = l1.sum(axis=1)  # both half-edges share |e| and w
    value = float(np.sum(lens * g * per_edge))
    if buffers is None:
        return value
    sgn = np.sign(delta)
    coeff = (scale * lens * g)[:, None, None] * sgn
    buffers.l += coeff
    buffers.r -= coeff
    w = sigmoid(10.0 * model.w_raw.astype(np.float64))
    dw = scale * lens * per_edge * 10.0 * w * (1.0 - w)
    dw[model.frozen] = 0.0
    buffers.w_raw += dw
    if want_vertex_grads:
        a = mesh.edges[:, 0]
        b = mesh.edges[:, 1]
        d = mesh.vertices[a] - mesh.vertices[b]
        safe = np.maximum(lens, 1e-300)
        unit = d / safe[:, None]
        coef_v = (scale * g * per_edge)[:, None] * unit
        np.add.at(buffers.vertices, a, coef_v)
        np.add.at(buffers.vertices, b, -coef_v)
    return value


# ----------------------------------------------------------------------
# edge-sampling Monte Carlo vertex gradient
# ----------------------------------------------------------------------


def importance_sample_edges(model: FieldModel, n: int, beta: float, multiplier: float,
                            rng: np.random.Generator):
    """Sample edge points with importance on likely-discontinuous edges.

    The important set is {D > beta} plus all edges sharing a vertex with it;
    important edges get ``multiplier`` times the per-unit-length probability
    of the rest. Returns (edge ids, u in [0,1), weights, info); the weight
    of a sample is the reciprocal of its per-unit-length density, so
    mean(weight * h(x)) estimates the line integral of h over all candidate
    edges.
    """
    mesh = model.mesh
    D = model.discontinuity_indicator()
    cand = np.flatnonzero(~mesh.boundary_edge & ~model.frozen)
    info = {"candidates": cand}
    if len(cand) == 0 or n == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), info)
    lens = mesh.edge_lengths()[cand]
    imp = D[cand] > beta
    vset = np.zeros(mesh.n_vertices, dtype=bool)
    vset[mesh.edges[cand[imp]].ravel()] = True
    imp_ext = imp | vset[mesh.edges[cand, 0]] | vset[mesh.edges[cand, 1]]
    mult = np.where(imp_ext, float(multiplier), 1.0)
    wq = lens * mult
    Z = float(wq.sum())
    if Z <= 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), info)
    q = wq / Z
    pick = rng.choice(len(cand), size=n, p=q)
    u = rng.random(n)
    weights = Z / mult[pick]
    info.update({"Z": Z, "important": cand[imp_ext], "q": q, "multiplier": mult})
    return cand[pick].astype(np.int64), u, weights, info


EDGE_OFFSET_EPS = 1e-6  # canvas units, two-sided evaluation offset


def edge_gradient(model: FieldModel, image: TargetImage, n_edge_samples: int,
                  rng: np.random.Generator, beta=0.02, multiplier=5.0,
                  buffers: GradBuffers = None):
    """Edge-sampling Monte Carlo estimate of the discontinuity vertex grads.

    Each sample x on edge (a, b) contributes
        (loss(x - eps*nhat) - loss(x + eps*nhat)) * nhat
    split to the endpoints by the parametric position; nhat is the left
    normal of a->b. Unbiased w.r.t. the edge-selection distribution.
    Returns (vertex_grads, n_samples, status).
    """
    mesh = model.mesh
    nv = mesh.n_vertices
    vgrad = np.zeros((nv, 2))
    D = model.discontinuity_indicator()
    if not np.any(D[~mesh.boundary_edge] > 0):
        if buffers is not None:
            buffers.n_edge += 0
        return vgrad, 0, "warning: no discontinuous edges"
    e_idx, u, weights, info = importance_sample_edges(model, n_edge_samples, beta, multiplier, rng)
    n = len(e_idx)
    if n == 0:
        return vgrad, 0, "warning: no candidate edges"
    a = mesh.edges[e_idx, 0]
    b = mesh.edges[e_idx, 1]
    pa = mesh.vertices[a]
    pb = mesh.vertices[b]
    d = pb - pa
    lens = np.hypot(d[:, 0], d[:, 1])
    nhat = perp(d) / np.maximum(lens, 1e-300)[:, None]
    x = pa + u[:, None] * d
    xp = x + EDGE_OFFSET_EPS * nhat
    xm = x - EDGE_OFFSET_EPS * nhat
    # the left side of a->b is the face in edge slot 0 (a = lower endpoint)
    f_plus = mesh.edge_face[e_idx, 0].astype(np.int64)
    f_minus = mesh.edge_face[e_idx, 1].astype(np.int64)

    def side_values(ptsq, faces):
        lam = mesh._barycentric(ptsq, faces)
        np.clip(lam, 0.0, 1.0, out=lam)
        lam /= lam.sum(axis=1, keepdims=True)
        F = model.features(faces, lam, ptsq)
        return mlp_forward(F, model.mlp).astype(np.float64)

    fp = side_values(xp, f_plus)
    fm = side_values(xm, f_minus)
    tgt = image.sample(x)
    lp = np.sum((fp - tgt) ** 2, axis=1)
    lm = np.sum((fm - tgt) ** 2, axis=1)
    jump = lm - lp  # dL per unit normal motion toward the + side
    scale = weights * jump / n
    np.add.at(vgrad, a, (scale * (1.0 - u))[:, None] * nhat)
    np.add.at(vgrad, b, (scale * u)[:, None] * nhat)
    if buffers is not None:
        buffers.vertices += vgrad
        buffers.n_edge += n
    return vgrad, n, "ok"


# ----------------------------------------------------------------------
# vertex-gradient preconditioning
# ----------------------------------------------------------------------


def graph_laplacian(mesh: Mesh2D) -> sp.csc_matrix:
    """Combinatorial Laplacian D - A of the mesh edge graph."""
    nv = mesh.n_vertices
    a = mesh.edges[:, 0]
    b = mesh.edges[:, 1]
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate(
        [-np.ones(len(a)), -np.ones(len(a)), np.ones(len(a)), np.ones(len(a))]
    )
    return sp.csc_matrix((vals, (rows, cols)), shape=(nv, nv))


class VertexPreconditioner:
    """Factorized solver for (I + w L) u = g, reused across epochs."""

    def __init__(self, mesh: Mesh2D, weight: float):
        self.weight = float(weight)
        if self.weight <= 0:
            self.solve_mat = None
        else:
            nv = mesh.n_vertices
            A = sp.identity(nv, format="csc") + self.weight * graph_laplacian(mesh)
            self.solve_mat = spla.factorized(A.tocsc())

    def apply(self, grads: np.ndarray) -> np.ndarray:
        if self.solve_mat is None:
            return grads.copy()
        out = np.empty_like(grads)
        for c in range(grads.shape[1]):
            out[:, c] = self.solve_mat(np.ascontiguousarray(grads[:, c]))
        return out


def precondition_vertex_grads(mesh: Mesh2D, grads, weight: float) -> np.ndarray:
    """Solve (I + weight * L) u = g per coordinate; falls back to raw grads
    when the solve fails."""
    try:
        return VertexPreconditioner(mesh, weight).apply(np.asarray(grads, dtype=np.float64))
    except Exception:
        return np.asarray(grads, dtype=np.float64).copy()


# ----------------------------------------------------------------------
# the fit schedule
# ----------------------------------------------------------------------


def _d_summary(model: FieldModel, beta: float) -> dict:
    D = model.discontinuity_indicator()
    return {
        "d_max": float(D.max()) if len(D) else 0.0,
        "n_above_beta": int(np.sum(D > beta)),
        "n_frozen": int(np.sum(model.frozen)),
    }


def fit(model: FieldModel, image: TargetImage, config: TrainConfig,
        report: FitReport = None, stage: str = "main",
        epoch_offset: int = 0) -> FitReport:
    """Run the optimization schedule on ``model`` in place.

    stage="main" runs ``epochs_interior_only`` field-only epochs followed by
    ``epochs_joint`` joint epochs with edge-sampled vertex gradients;
    stage="refine" runs ``epochs_post_round`` joint epochs (used after
    rounding, with frozen masks respected). Gradients from all interior and
    edge samples of an epoch are accumulated into one optimizer step.
    """
    config.validate()
    if report is None:
        report = FitReport()
    mesh = model.mesh
    W, H = image.width, image.height
    n_edge_samples = int(round(config.edge_samples_per_pixel * W * H))
    lr_vert = config.lr_vertices / max(W, H)
    beta = config.importance_threshold

    if stage == "main":
        schedule = [("interior", config.epochs_interior_only), ("joint", config.epochs_joint)]
        seed_base = 1
    elif stage == "refine":
        schedule = [("joint", config.epochs_post_round)]
        seed_base = 2
    else:
        raise ValueError(f"unknown stage {stage!r}")

    buffers = GradBuffers(model)
    state = AdamState()
    precond = VertexPreconditioner(mesh, config.precondition_weight)
    interior_boundary = mesh.boundary_vertex

    epoch = epoch_offset
    for phase, n_epochs in schedule:
        joint = phase == "joint"
        for _ in range(n_epochs):
            rng_i = derive_rng(config.seed, seed_base, epoch, 0)
            rng_e = derive_rng(config.seed, seed_base, epoch, 1)
            buffers.zero_()
            samples = stratified_subpixel_samples(W, H, config.spp_interior, rng_i)
            li, n_in = loss_interior(model, image, samples, buffers, want_vertex_grads=joint)
            ls = loss_sparsity(
                model, buffers, scale=config.lambda_discont, want_vertex_grads=joint
            )
            n_es = 0
            if joint:
                _, n_es, _ = edge_gradient(
                    model, image, n_edge_samples, rng_e, beta=beta,
                    multiplier=config.importance_multiplier, buffers=buffers,
                )
            total = li + config.lambda_discont * ls
            if not np.isfinite(total):
                raise FitAbort(
                    f"non-finite loss at epoch {epoch}",
                    snapshot={"epoch": epoch, "interior": li, "sparsity": ls},
                )
            buffers.assert_finite()

            state.t += 1
            lr = config.lr_field
            adam_step(model.w_raw, buffers.w_raw, state, "w_raw", lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            adam_step(model.l, buffers.l, state, "l", lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            adam_step(model.r, buffers.r, state, "r", lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            adam_step(model.bias, buffers.bias, state, "bias", lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            for i in range(model.mlp.n_layers):
                adam_step(model.mlp.weights[i], buffers.mlp.weights[i], state, f"mlp_w{i}", lr,
                          config.adam_beta1, config.adam_beta2, config.adam_eps)
                adam_step(model.mlp.biases[i], buffers.mlp.biases[i], state, f"mlp_b{i}", lr,
                          config.adam_beta1, config.adam_beta2, config.adam_eps)
            if joint and lr_vert > 0:
                vg = buffers.vertices.copy()
                vg[interior_boundary] = 0.0
                vg = precond.apply(vg)
                vg[interior_boundary] = 0.0
                old = mesh.vertices.copy()
                adam_step(mesh.vertices, vg, state, "vertices", lr_vert,
                          config.adam_beta1, config.adam_beta2, config.adam_eps)
                # reject steps that would invert any face (halve until valid)
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

            report.add_epoch(
                epoch=epoch,
                stage=stage,
                phase=phase,
                interior_loss=li,
                sparsity_loss=ls,
                edge_samples=n_es,
                interior_samples=n_in,
                **_d_summary(model, beta),
            )
            epoch += 1
    return report


# ----------------------------------------------------------------------
# 1D fixture fitting (demonstration / tests)
# ----------------------------------------------------------------------


def fit_1d(model: Field1D, target_fn, n_samples=512, epochs=800, lr=2e-2, seed=0):
    """Fit the 1D circle field to target_fn: [0,1) -> R^d by Adam."""
    rng = derive_rng(seed, 9)
    state = AdamState()
    for epoch in range(epochs):
        x = rng.random(n_samples)
        t = model.t(x)  # (n, nv)
        F = model.features(x)
        out, cache = mlp_forward(F, model.mlp, want_cache=True)
        tgt = np.atleast_2d(np.asarray(target_fn(x), dtype=np.float64))
        if tgt.shape != out.shape:
            tgt = tgt.reshape(out.shape)
        res = out - tgt
        dout = (2.0 / n_samples) * res
        dF, mlp_g = mlp_backward(cache, model.mlp, dout)
        delta = model.l - model.r
        dw = np.einsum("nk,ni,ik->i", dF, t, delta) + dF.sum(axis=0) @ model.r.T
        dl = np.einsum("nk,ni->ik", dF, t * model.w)
        dr = np.einsum("nk,ni->ik", dF, (1.0 - t) * model.w)
        db = dF.sum(axis=0)
        state.t += 1
        adam_step(model.w, dw, state, "w", lr)
        adam_step(model.l, dl, state, "l", lr)
        adam_step(model.r, dr, state, "r", lr)
        adam_step(model.bias, db, state, "bias", lr)
        for i in range(model.mlp.n_layers):
            adam_step(model.mlp.weights[i], mlp_g.weights[i], state, f"w{i}", lr)
            adam_step(model.mlp.biases[i], mlp_g.biases[i], state, f"b{i}", lr)
    return model
