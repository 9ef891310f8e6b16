"""Rounding: convert almost-continuous edges to exactly continuous ones.

Stage 1 unconditionally discards every edge whose discontinuity indicator
D = max |w (l - r)| falls below the threshold beta. Stage 2 walks the
remaining edges in increasing-D order and discards greedily while the
accumulated MSE increase on a fixed evaluation sample set stays below the
budget sigma. Discarding an edge pushes its angular-mean contribution
0.5 * w * (l - r) + w * r into the center vertex bias of each half-edge,
then freezes the edge; for an edge with w*(l-r) = 0 the push is exact and
inference is unchanged everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import FieldModel, mlp_forward
from .imgio import TargetImage
from .train import derive_rng, stratified_subpixel_samples


@dataclass
class RoundingPlan:
    beta: float = 0.02
    sigma: float = 5e-6
    eval_spp: int = 4
    seed: int = 0
    decisions: list = dc_field(default_factory=list)

    def accepted_delta_total(self) -> float:
        return float(
            sum(d["delta"] for d in self.decisions if d["stage"] == 2 and d["discarded"])
        )


def indicator_histogram(model: FieldModel, bins: int = 24):
    """Log-scale histogram of the discontinuity indicator.

    Returns (edges, counts, n_zero): ``edges`` are log10-spaced bin edges
    covering (1e-8, max(D)]; exact zeros (rounded / empty edges) are counted
    separately in ``n_zero``.
    """
    D = model.discontinuity_indicator()
    n_zero = int(np.sum(D <= 0))
    pos = D[D > 0]
    if len(pos) == 0:
        return np.array([]), np.zeros(0, dtype=np.int64), n_zero
    lo = max(pos.min(), 1e-8)
    hi = max(pos.max(), lo * 10)
    edges = np.logspace(np.log10(lo) - 1e-9, np.log10(hi) + 1e-9, bins + 1)
    counts, _ = np.histogram(pos, bins=edges)
    return edges, counts.astype(np.int64), n_zero


class _EvalCache:
    """Fixed evaluation samples with per-sample residual bookkeeping."""

    def __init__(self, model: FieldModel, image: TargetImage, plan: RoundingPlan):
        rng = derive_rng(plan.seed, 77)
        pts = stratified_subpixel_samples(image.width, image.height, plan.eval_spp, rng)
        face, lam = model.mesh.locate(pts)
        keep = face >= 0
        self.pts = pts[keep]
        self.face = face[keep]
        self.lam = lam[keep]
        self.tgt = image.sample(self.pts)
        self.n = len(self.pts)
        self.d = model.d
        order = np.argsort(self.face, kind="stable")
        self.by_face = order
        nf = model.mesh.n_faces
        self.face_ptr = np.searchsorted(self.face[order], np.arange(nf + 1))
        self.cur_sq = self._eval_sq(model, np.arange(self.n))
        # vertex -> incident faces (CSR)
        faces = model.mesh.faces
        v_of = faces.ravel().astype(np.int64)
        f_of = np.repeat(np.arange(nf, dtype=np.int64), 3)
        o = np.argsort(v_of, kind="stable")
        self.vf_faces = f_of[o]
        self.vf_ptr = np.searchsorted(v_of[o], np.arange(model.mesh.n_vertices + 1))

    def _eval_sq(self, model, idx):
        F = model.features(self.face[idx], self.lam[idx], self.pts[idx])
        out = mlp_forward(F, model.mlp).astype(np.float64)
        res = out - self.tgt[idx]
        return (res * res).sum(axis=1)

    def samples_near(self, model, i, j):
        """Sample indices inside faces incident to vertex i or j."""
        fi = self.vf_faces[self.vf_ptr[i] : self.vf_ptr[i + 1]]
        fj = self.vf_faces[self.vf_ptr[j] : self.vf_ptr[j + 1]]
        faces = np.unique(np.concatenate([fi, fj]))
        chunks = [self.by_face[self.face_ptr[f] : self.face_ptr[f + 1]] for f in faces]
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)

    def mse(self) -> float:
        return float(self.cur_sq.sum() / (self.n * self.d))


def _push_and_freeze(model: FieldModel, e: int):
    """Fold edge e's angular-mean contribution into its vertex biases."""
    mesh = model.mesh
    i, j = (int(x) for x in mesh.edges[e])
    w = float(model.gate()[e])
    l = model.l[e].astype(np.float64)
    r = model.r[e].astype(np.float64)
    push0 = 0.5 * w * (l[0] - r[0]) + w * r[0]  # half-edge leaving i
    push1 = 0.5 * w * (l[1] - r[1]) + w * r[1]  # half-edge leaving j
    model.bias[i] += push0.astype(model.dtype)
    model.bias[j] += push1.astype(model.dtype)
    model.frozen[e] = True
    model.l[e] = 0
    model.r[e] = 0
    model.w_raw[e] = 0
    return (i, j)


def round_edges(model: FieldModel, image: TargetImage, plan: RoundingPlan):
    """Run the two-stage rounding on ``model`` in place.

    Returns (model, plan); ``plan.decisions`` holds one record per edge
    touched, in decision order.
    """
    D = model.discontinuity_indicator()
    mesh = model.mesh

    # stage 1: hard threshold, unconditional, budget-exempt
    stage1 = np.flatnonzero((~model.frozen) & (D < plan.beta))
    for e in stage1:
        i, j = _push_and_freeze(model, int(e))
        plan.decisions.append(
            {
                "edge": (i, j),
                "D": float(D[e]),
                "stage": 1,
                "discarded": True,
                "delta": 0.0,
            }
        )

    # stage 2: greedy min-D queue under the accumulated-MSE budget
    cache = _EvalCache(model, image, plan)
    remaining = np.flatnonzero(~model.frozen)
    order = remaining[np.argsort(D[remaining], kind="stable")]
    accum = 0.0
    for e in order:
        e = int(e)
        i, j = (int(x) for x in mesh.edges[e])
        idx = cache.samples_near(model, i, j)
        before = float(cache.cur_sq[idx].sum())
        # hypothetically discard
        saved = (model.bias[i].copy(), model.bias[j].copy(),
                 model.l[e].copy(), model.r[e].copy(),
                 float(model.w_raw[e]))
        _push_and_freeze(model, e)
        new_sq = cache._eval_sq(model, idx)
        delta = (float(new_sq.sum()) - before) / (cache.n * cache.d)
        if accum + delta < plan.sigma:
            accum += delta
            cache.cur_sq[idx] = new_sq
            plan.decisions.append(
                {"edge": (i, j), "D": float(D[e]), "stage": 2, "discarded": True,
                 "delta": delta}
            )
        else:
            model.bias[i], model.bias[j] = saved[0], saved[1]
            model.l[e], model.r[e] = saved[2], saved[3]
            model.w_raw[e] = saved[4]
            model.frozen[e] = False
            plan.decisions.append(
                {"edge": (i, j), "D": float(D[e]), "stage": 2, "discarded": False,
                 "delta": delta}
            )
    return model, plan


# ----------------------------------------------------------------------
# discontinuity extraction
# ----------------------------------------------------------------------


def extract_discontinuities(model: FieldModel) -> list:
    """Chain non-frozen edges into polylines of vertex positions.

    Returns a list of (n_i, 2) arrays; closed chains repeat their first
    point at the end.
    """
    mesh = model.mesh
    kept = np.flatnonzero(~model.frozen)
    if len(kept) == 0:
        return []
    adj = {}
    for e in kept:
        a, b = (int(x) for x in mesh.edges[e])
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    for v in adj:
        adj[v] = sorted(adj[v])
    visited = set()
    chains = []

    def walk(start, nxt):
        chain = [start, nxt]
        visited.add((start, nxt))
        visited.add((nxt, start))
        prev, cur = start, nxt
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

    nodes = sorted(adj)
    for v in nodes:
        if len(adj[v]) == 2:
            continue
        for u in adj[v]:
            if (v, u) not in visited:
                chains.append(walk(v, u))
    for v in nodes:  # pure cycles
        for u in adj[v]:
            if (v, u) not in visited:
                chains.append(walk(v, u))
    return [mesh.vertices[np.array(c)] for c in chains]


def chains_to_svg(chains: list, width: int, height: int) -> str:
    """Stroke-only SVG polylines in pixel coordinates."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for ch in chains:
        pts = " ".join(f"{x * width:.4f},{y * height:.4f}" for x, y in ch)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
