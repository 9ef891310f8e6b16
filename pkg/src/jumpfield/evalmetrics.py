"""Metrics (PSNR, MSE, Chamfer) and the denoising benchmark harness.

The harness fits each method on the noisy raster of a scene and scores it
against the clean raster at the native scale and at 2x (the field is
rendered at 2W x 2H against a 2x clean reference). Chamfer distance is the
symmetric mean nearest-neighbor distance between arc-length samplings of
the extracted discontinuity chains and the ground-truth curve geometry,
reported in native-resolution pixels. The built-in reference baseline is a
per-vertex continuous feature field trained under an identical budget.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .datagen import CurveScene, load_scene, scene_distance
from .field import FieldModel, MlpParams, mlp_backward, mlp_forward, render_field
from .imgio import TargetImage, read_pfm
from .pipeline import PipelineConfig, fit_pipeline
from .rounding import extract_discontinuities
from .train import AdamState, adam_step, derive_rng, stratified_subpixel_samples

PSNR_CAP_DB = 99.0


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=1.0) -> float:
    """PSNR in dB over linear [0,1] values; identical inputs cap at 99."""
    m = mse(a, b)
    if m <= 0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(peak * peak / m)), PSNR_CAP_DB)


# ----------------------------------------------------------------------
# Chamfer distance
# ----------------------------------------------------------------------


def sample_polylines_by_arclength(chains, n_total: int) -> np.ndarray:
    """n points uniformly by arc length over a list of (m,2) polylines."""
    segs = []
    for ch in chains:
        ch = np.asarray(ch, dtype=np.float64)
        for i in range(len(ch) - 1):
            L = float(np.hypot(*(ch[i + 1] - ch[i])))
            if L > 1e-12:
                segs.append((ch[i], ch[i + 1], L))
    if not segs:
        return np.zeros((0, 2))
    lens = np.array([s[2] for s in segs])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    s = (np.arange(n_total) + 0.5) / n_total * total
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(segs) - 1)
    t = (s - cum[idx]) / lens[idx]
    p0 = np.array([segs[i][0] for i in idx])
    p1 = np.array([segs[i][1] for i in idx])
    return p0 + t[:, None] * (p1 - p0)


def chamfer(chains, gt_scene: CurveScene, n_samples: int = 10_000,
            px_scale: float = None) -> float:
    """Symmetric mean NN distance, in native-resolution pixel units."""
    if px_scale is None:
        px_scale = float(gt_scene.canvas_px)
    a = sample_polylines_by_arclength(chains, n_samples)
    b = gt_scene.outline_samples(n_samples)
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    ta = cKDTree(a)
    tb = cKDTree(b)
    d_ab = tb.query(a)[0].mean()
    d_ba = ta.query(b)[0].mean()
    return float(0.5 * (d_ab + d_ba) * px_scale)


def curve_band_mask(scene: CurveScene, width: int, height: int,
                    radius_native_px: float) -> np.ndarray:
    """Pixels whose center lies within the given native-pixel radius of a
    ground-truth curve."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d, _ = scene_distance(scene, pts)
    return (d * scene.canvas_px <= radius_native_px).reshape(height, width)


def band_mse(img, ref, scene: CurveScene, radius_native_px: float = 1.5) -> float:
    """MSE restricted to the discontinuity neighborhood band."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    h, w = img.shape[:2]
    mask = curve_band_mask(scene, w, h, radius_native_px)
    if not np.any(mask):
        return 0.0
    return float(np.mean((img[mask] - ref[mask]) ** 2))


def upsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


# ----------------------------------------------------------------------
# per-vertex continuous baseline
# ----------------------------------------------------------------------


class PerVertexField:
    """Continuous hybrid field: one feature vector per vertex, same MLP."""

    def __init__(self, mesh, k=8, d=3, hidden=(128, 128), rng=None, background=None):
        self.mesh = mesh
        self.k, self.d = int(k), int(d)
        self.features = np.zeros((mesh.n_vertices, k), dtype=np.float32)
        self.mlp = MlpParams.create(k, d, hidden=hidden, rng=rng, dtype=np.float32)
        self.background = (
            np.zeros(d) if background is None else np.asarray(background, dtype=np.float64)
        )

    def interp(self, face, lam):
        vid = self.mesh.faces[face]
        return np.einsum("nc,nck->nk", lam.astype(np.float32), self.features[vid])

    def infer_batch(self, pts, outside="background"):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        face, lam = self.mesh.locate(pts)
        inside = face >= 0
        out = np.empty((len(pts), self.d))
        out[~inside] = self.background
        if np.any(inside):
            F = self.interp(face[inside], lam[inside])
            out[inside] = mlp_forward(F, self.mlp).astype(np.float64)
        return out


def fit_per_vertex(model: PerVertexField, image: TargetImage, epochs: int,
                   spp: int, lr: float, seed: int) -> PerVertexField:
    """Interior-only training of the baseline under the shared budget."""
    mesh = model.mesh
    W, H = image.width, image.height
    state = AdamState()
    nv = mesh.n_vertices
    for epoch in range(epochs):
        rng = derive_rng(seed, 3, epoch)
        pts = stratified_subpixel_samples(W, H, spp, rng)
        face, lam = mesh.locate(pts)
        inside = face >= 0
        pts_in = pts[inside]
        tgt = image.sample(pts_in)
        vid = mesh.faces[face[inside]]
        lam_in = lam[inside].astype(np.float32)
        F = np.einsum("nc,nck->nk", lam_in, model.features[vid])
        out, cache = mlp_forward(F, model.mlp, want_cache=True)
        res = out.astype(np.float64) - tgt
        n = len(pts)
        dout = ((2.0 / n) * res).astype(np.float32)
        dF, mlp_g = mlp_backward(cache, model.mlp, dout)
        dP = np.zeros((nv, model.k))
        contrib = lam_in[:, :, None] * dF[:, None, :]  # (m,3,k)
        flat_v = vid.ravel()
        flat_c = contrib.reshape(-1, model.k)
        for j in range(model.k):
            dP[:, j] = np.bincount(flat_v, weights=flat_c[:, j].astype(np.float64), minlength=nv)
        state.t += 1
        adam_step(model.features, dP, state, "P", lr)
        for i in range(model.mlp.n_layers):
            adam_step(model.mlp.weights[i], mlp_g.weights[i].astype(np.float64), state, f"w{i}", lr)
            adam_step(model.mlp.biases[i], mlp_g.biases[i].astype(np.float64), state, f"b{i}", lr)
    return model


# ----------------------------------------------------------------------
# benchmark harness
# ----------------------------------------------------------------------


@dataclass
class MetricReport:
    records: list = dc_field(default_factory=list)
    summary: dict = dc_field(default_factory=dict)

    def compute_summary(self):
        methods = sorted({r["method"] for r in self.records})
        self.summary = {}
        for m in methods:
            ok = [r for r in self.records if r["method"] == m and r["status"] == "ok"]
            failed = [r for r in self.records if r["method"] == m and r["status"] != "ok"]
            entry = {"n_ok": len(ok), "n_failed": len(failed)}
            for key in ("psnr_1x", "psnr_2x", "chamfer_px", "band_mse_1x", "band_mse_2x"):
                vals = [r[key] for r in ok if r.get(key) is not None]
                if vals:
                    entry[f"median_{key}"] = float(np.median(vals))
                    entry[f"mean_{key}"] = float(np.mean(vals))
            self.summary[m] = entry
        return self.summary

    def to_text(self) -> str:
        lines = [json.dumps({"type": "record", **r}, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"type": "summary", "methods": self.summary}, sort_keys=True))
        lines.append(json.dumps({"type": "note",
                                 "metrics": "PSNR/MSE/Chamfer only; no perceptual metric"}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rep = cls()
        for ln in text.splitlines():
            if not ln.strip():
                continue
            rec = json.loads(ln)
            kind = rec.pop("type")
            if kind == "record":
                rep.records.append(rec)
            elif kind == "summary":
                rep.summary = rec["methods"]
        return rep

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def evaluate_scene(entry: dict, method: str, cfg: PipelineConfig,
                   chamfer_samples: int = 10_000) -> dict:
    """Fit one method on one corpus entry and compute all metrics.

    ``entry`` holds file paths (scene, noisy, clean, clean2x) as written by
    the corpus generator.
    """
    rec = {"scene": entry["name"], "method": method, "status": "ok",
           "psnr_1x": None, "psnr_2x": None, "chamfer_px": None,
           "band_mse_1x": None, "band_mse_2x": None}
    try:
        scene = load_scene(entry["scene"])
        noisy = TargetImage(read_pfm(entry["noisy"]))
        clean = read_pfm(entry["clean"])
        clean2x = read_pfm(entry["clean2x"]) if entry.get("clean2x") else None
        W, H = noisy.width, noisy.height
        if method == "identity":
            out1 = noisy.pixels
            out2 = upsample_nearest(noisy.pixels, 2) if clean2x is not None else None
        elif method == "ours":
            model, _ = fit_pipeline(noisy, cfg)
            out1 = render_field(model, W, H)
            out2 = render_field(model, 2 * W, 2 * H) if clean2x is not None else None
            chains = extract_discontinuities(model)
            rec["chamfer_px"] = chamfer(chains, scene, chamfer_samples)
        elif method == "per-vertex":
            from .meshinit import initialize_mesh

            mesh = initialize_mesh(noisy, cfg.mesh_config())
            model = PerVertexField(
                mesh, k=cfg.k, d=noisy.channels,
                hidden=(cfg.hidden_width, cfg.hidden_width),
                rng=derive_rng(cfg.seed, 50),
                background=np.full(noisy.channels, cfg.background),
            )
            epochs = cfg.epochs_interior_only + cfg.epochs_joint + cfg.epochs_post_round
            fit_per_vertex(model, noisy, epochs, cfg.spp_interior, cfg.lr_field, cfg.seed)
            out1 = render_field(model, W, H)
            out2 = render_field(model, 2 * W, 2 * H) if clean2x is not None else None
        else:
            raise ValueError(f"unknown method {method!r}")
        rec["psnr_1x"] = psnr(out1, clean)
        rec["band_mse_1x"] = band_mse(out1, clean, scene)
        if clean2x is not None and out2 is not None:
            rec["psnr_2x"] = psnr(out2, clean2x)
            rec["band_mse_2x"] = band_mse(out2, clean2x, scene)
    except Exception as exc:  # failures recorded, excluded from medians
        rec["status"] = f"failed: {type(exc).__name__}: {exc}"
    return rec


def _worker(args):
    entry, method, cfg_text, chamfer_samples = args
    cfg = PipelineConfig.from_text(cfg_text)
    return evaluate_scene(entry, method, cfg, chamfer_samples)


def run_benchmark(manifest_path, methods, cfg: PipelineConfig,
                  threads: int = 1, chamfer_samples: int = 10_000) -> MetricReport:
    """Fit every method on every corpus scene and aggregate metrics."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def absify(entry):
        out = dict(entry)
        for key in ("scene", "noisy", "clean", "clean2x"):
            if out.get(key):
                out[key] = os.path.join(base, out[key])
        return out

    tasks = [
        (absify(e), m, cfg.to_text(), chamfer_samples)
        for e in manifest["scenes"]
        for m in methods
    ]
    report = MetricReport()
    if threads > 1 and len(tasks) > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(processes=threads) as pool:
            for rec in pool.map(_worker, tasks):
                report.records.append(rec)
    else:
        for t in tasks:
            report.records.append(_worker(t))
    report.compute_summary()
    return report
