"""End-to-end fitting pipeline and the flat pipeline configuration.

The pipeline is: mesh initialization (Canny + CDT + proxy fit) -> joint
field/vertex optimization -> rounding -> post-round refinement. The flat
``PipelineConfig`` mirrors the stage configs one key per line for the CLI
config file; unknown keys are rejected and round-trips are lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import DEFAULT_K, FieldModel, FORMAT_VERSION
from .imgio import TargetImage
from .meshinit import MeshInitConfig, initialize_mesh
from .rounding import RoundingPlan, round_edges
from .train import FitReport, TrainConfig, derive_rng, fit


@dataclass
class PipelineConfig:
    # model
    k: int = DEFAULT_K
    hidden_width: int = 128
    seed: int = 0
    background: float = 0.0
    # mesh initialization
    canny_low: float = 100.0
    canny_high: float = 200.0
    presmooth_sigma: float = 0.0  # 0 disables pre-smoothing
    target_edge_len: float = 1e-2
    proxy_epochs: int = 200
    remesh_every: int = 50
    sharpness: float = 0.1
    lambda_boundary: float = 1e-2
    collapse_area_frac: float = 2e-5
    collapse_angle_deg: float = 120.0
    split_loss_threshold: float = 2.0
    lambda_delaunay: float = 0.5
    proxy_lr_vertices: float = 1.0
    proxy_precondition_weight: float = 1.0
    samples_per_pixel_area: float = 1.0
    # field optimization
    epochs_interior_only: int = 70
    epochs_joint: int = 130
    epochs_post_round: int = 200
    spp_interior: int = 4
    edge_samples_per_pixel: float = 16.0
    lambda_discont: float = 5e-3
    lr_vertices: float = 1.0
    lr_field: float = 2e-2
    precondition_weight: float = 0.5
    importance_multiplier: float = 5.0
    beta: float = 0.02
    # rounding
    sigma: float = 5e-6
    rounding_eval_spp: int = 4

    def mesh_config(self) -> MeshInitConfig:
        return MeshInitConfig(
            canny_low=self.canny_low,
            canny_high=self.canny_high,
            presmooth_sigma=self.presmooth_sigma or None,
            target_edge_len=self.target_edge_len,
            proxy_epochs=self.proxy_epochs,
            remesh_every=self.remesh_every,
            sharpness=self.sharpness,
            lambda_boundary=self.lambda_boundary,
            collapse_area_frac=self.collapse_area_frac,
            collapse_angle_deg=self.collapse_angle_deg,
            split_loss_threshold=self.split_loss_threshold,
            lambda_delaunay=self.lambda_delaunay,
            lr_vertices=self.proxy_lr_vertices,
            precondition_weight=self.proxy_precondition_weight,
            samples_per_pixel_area=self.samples_per_pixel_area,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs_interior_only=self.epochs_interior_only,
            epochs_joint=self.epochs_joint,
            epochs_post_round=self.epochs_post_round,
            spp_interior=self.spp_interior,
            edge_samples_per_pixel=self.edge_samples_per_pixel,
            lambda_discont=self.lambda_discont,
            lr_vertices=self.lr_vertices,
            lr_field=self.lr_field,
            precondition_weight=self.precondition_weight,
            importance_multiplier=self.importance_multiplier,
            importance_threshold=self.beta,
            seed=self.seed,
        )

    def rounding_plan(self) -> RoundingPlan:
        return RoundingPlan(
            beta=self.beta, sigma=self.sigma, eval_spp=self.rounding_eval_spp, seed=self.seed
        )

    # -- flat text form -----------------------------------------------------

    def to_text(self) -> str:
        lines = [f"format_version {FORMAT_VERSION}"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for ln in text.splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            parts = ln.split(None, 1)
            if len(parts) != 2:
                raise ValueError(f"malformed config line: {ln!r}")
            key, val = parts
            if key == "format_version":
                if int(val) != FORMAT_VERSION:
                    raise ValueError(f"config format version {val} unsupported")
                continue
            if key not in known:
                raise ValueError(f"unknown config key: {key!r}")
            anno = known[key]
            if anno in ("int", int):
                kwargs[key] = int(val)
            else:
                kwargs[key] = float(val)
        return cls(**kwargs)


def update_config(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Apply string-keyed overrides with type coercion; unknown keys raise."""
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    out = dataclasses.replace(cfg)
    for key, val in overrides.items():
        if key not in known:
            raise ValueError(f"unknown config key: {key!r}")
        cur = getattr(cfg, key)
        setattr(out, key, type(cur)(val))
    return out


def fit_pipeline(image: TargetImage, cfg: PipelineConfig,
                 report: Optional[FitReport] = None):
    """Full pipeline: mesh init, joint fit, rounding, post-round refinement.

    Returns (model, report); the model embeds the config text for
    provenance.
    """
    if report is None:
        report = FitReport()
    mesh = initialize_mesh(image, cfg.mesh_config())
    model = FieldModel(
        mesh,
        k=cfg.k,
        d=image.channels,
        hidden=(cfg.hidden_width, cfg.hidden_width),
        rng=derive_rng(cfg.seed, 50),
        dtype=np.float32,
        background=np.full(image.channels, cfg.background),
    )
    model.config_blob = cfg.to_text()
    tcfg = cfg.train_config()
    fit(model, image, tcfg, report, stage="main")
    plan = cfg.rounding_plan()
    round_edges(model, image, plan)
    report.rounding = [
        {"edge": list(d["edge"]), "D": d["D"], "stage": d["stage"],
         "discarded": bool(d["discarded"]), "delta": d["delta"]}
        for d in plan.decisions
    ]
    fit(model, image, tcfg, report, stage="refine",
        epoch_offset=tcfg.epochs_interior_only + tcfg.epochs_joint)
    report.final = {
        "n_edges": int(mesh.n_edges),
        "n_frozen": int(np.sum(model.frozen)),
        "n_discontinuous": int(np.sum(~model.frozen)),
        "format_version": FORMAT_VERSION,
    }
    return model, report
