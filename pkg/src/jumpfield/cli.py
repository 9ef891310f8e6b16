"""Command-line interface: gen | fit | render | extract | eval.

Every command is deterministic given (inputs, config, seed); ``--threads``
only parallelizes work whose output is worker-count invariant.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .datagen import gen_random_scene, render_scene, save_scene
from .field import load_model, render_field, save_model
from .imgio import load_image, save_image, write_pfm
from .pipeline import PipelineConfig, fit_pipeline, update_config
from .rounding import chains_to_svg, extract_discontinuities
from .evalmetrics import MetricReport, run_benchmark
from .train import FitAbort


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = PipelineConfig.from_text(fh.read())
    else:
        cfg = PipelineConfig()
    overrides = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise SystemExit(f"--set expects key=value, got {kv!r}")
        key, val = kv.split("=", 1)
        overrides[key] = val
    cfg = update_config(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


def cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i in range(args.count):
        if args.scene_class == "half":
            klass = "rect-only" if i % 2 else "mixed"
        else:
            klass = args.scene_class
        sseed = _scene_seed(args.seed, i)
        scene = gen_random_scene(sseed, klass, canvas_px=args.canvas_px)
        name = f"scene_{i:03d}"
        px = args.canvas_px
        scene_path = f"{name}.scene.txt"
        save_scene(scene, os.path.join(args.out, scene_path))
        noisy = render_scene(scene, px, px, args.spp_noisy, seed=sseed,
                             threads=args.threads)
        clean = render_scene(scene, px, px, args.spp_clean, seed=sseed + 1,
                             threads=args.threads)
        paths = {
            "name": name,
            "class": klass,
            "scene": scene_path,
            "noisy": f"{name}.noisy.pfm",
            "clean": f"{name}.clean.pfm",
        }
        write_pfm(os.path.join(args.out, paths["noisy"]), noisy)
        write_pfm(os.path.join(args.out, paths["clean"]), clean)
        save_image(noisy, os.path.join(args.out, f"{name}.noisy.png"))
        save_image(clean, os.path.join(args.out, f"{name}.clean.png"))
        if args.scale2x:
            clean2 = render_scene(scene, 2 * px, 2 * px, args.spp_clean,
                                  seed=sseed + 2, threads=args.threads)
            paths["clean2x"] = f"{name}.clean2x.pfm"
            write_pfm(os.path.join(args.out, paths["clean2x"]), clean2)
        entries.append(paths)
    manifest = {
        "version": 1,
        "seed": args.seed,
        "canvas_px": args.canvas_px,
        "spp_noisy": args.spp_noisy,
        "spp_clean": args.spp_clean,
        "scenes": entries,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"wrote {len(entries)} scenes to {args.out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    image = load_image(args.image)
    try:
        model, report = fit_pipeline(image, cfg)
    except FitAbort as exc:
        print(f"fit aborted: {exc} {exc.snapshot}", file=sys.stderr)
        return 2
    save_model(model, args.out)
    report_path = args.report or (args.out + ".report.jsonl")
    report.save(report_path)
    print(f"model -> {args.out}\nreport -> {report_path}")
    return 0


def cmd_render(args) -> int:
    model = load_model(args.model)
    region = None
    if args.region:
        region = tuple(float(v) for v in args.region.split(","))
        if len(region) != 4:
            raise SystemExit("--region expects x0,y0,x1,y1")
    img = render_field(model, args.width, args.height, region=region,
                       spp_grid=args.spp_grid)
    save_image(img, args.out)
    print(f"render -> {args.out}")
    return 0


def cmd_extract(args) -> int:
    model = load_model(args.model)
    chains = extract_discontinuities(model)
    svg = chains_to_svg(chains, args.size, args.size)
    with open(args.out, "w") as fh:
        fh.write(svg)
    print(f"{len(chains)} chains -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    if not manifest.get("scenes"):
        MetricReport().save(args.out)
        print("empty manifest; empty report written")
        return 0
    methods = args.methods.split(",")
    report = run_benchmark(args.manifest, methods, cfg, threads=args.threads,
                           chamfer_samples=args.chamfer_samples)
    report.save(args.out)
    for m, s in sorted(report.summary.items()):
        print(f"{m}: {json.dumps(s, sort_keys=True)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpfield",
                                description="discontinuity-learning mesh fields")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a diffusion-curve corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--class", dest="scene_class", default="half",
                   choices=["mixed", "rect-only", "half"])
    g.add_argument("--out", required=True)
    g.add_argument("--canvas-px", type=int, default=128)
    g.add_argument("--spp-noisy", type=int, default=50)
    g.add_argument("--spp-clean", type=int, default=500)
    g.add_argument("--scale2x", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit a field to a raster image")
    f.add_argument("image")
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--set", action="append", metavar="KEY=VALUE")
    f.add_argument("--report")
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a fitted model")
    r.add_argument("model")
    r.add_argument("--width", type=int, required=True)
    r.add_argument("--height", type=int, required=True)
    r.add_argument("--region", help="x0,y0,x1,y1 canvas sub-rectangle")
    r.add_argument("--spp-grid", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("extract", help="export discontinuity chains as SVG")
    e.add_argument("model")
    e.add_argument("--out", required=True)
    e.add_argument("--size", type=int, default=512)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="run the denoising benchmark")
    v.add_argument("manifest")
    v.add_argument("--out", required=True)
    v.add_argument("--methods", default="ours,per-vertex")
    v.add_argument("--config")
    v.add_argument("--set", action="append", metavar="KEY=VALUE")
    v.add_argument("--seed", type=int)
    v.add_argument("--chamfer-samples", type=int, default=10_000)
    v.add_argument("--threads", type=int, default=1)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
