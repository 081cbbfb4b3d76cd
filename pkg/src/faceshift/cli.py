"""Command-line entry point.

Commands: pretrain-oracles, gen-data, augment, train, retarget, evaluate,
ablate, grid, pipeline. Exit codes: 0 ok, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import pipeline
from .config import ConfigError, RunConfig, load_config


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _progress(stage_width: int = 0):
    def cb(step, loss):
        print(f"  step {step}: loss {loss:.4f}", flush=True)
    return cb


def cmd_pretrain_oracles(args) -> int:
    cfg = _load_cfg(args)
    pipeline.stage_oracles(cfg, args.out)
    pipeline.stage_base(cfg, args.out, progress=_progress() if args.verbose else None)
    print(f"oracles and base model written to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    if (out / "data").exists() and not args.force:
        print(f"error: {out / 'data'} exists (use --force)", file=sys.stderr)
        return 3
    if args.force:
        m = out / "data.done"
        if m.exists():
            m.unlink()
    if args.identities is not None:
        cfg.data.identities_test = args.identities
        cfg.data.identities_train = args.identities
    pipeline.stage_data(cfg, out)
    train = data_mod.read_manifest(out / "data" / "train.jsonl")
    test = data_mod.read_manifest(out / "data" / "test.jsonl")
    print(f"train frames: {len(train)}")
    print(f"test frames: {len(test)}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_cfg(args)
    if args.gamma is not None:
        cfg.augment.gamma = args.gamma
    if args.steps is not None:
        cfg.augment.n_steps = args.steps
    if args.filter_threshold is not None:
        cfg.augment.filter_threshold = args.filter_threshold
    stats = pipeline.stage_augment(cfg, args.out)
    print(json.dumps(stats, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.ablation:
        cfg.train.ablation = args.ablation
    pipeline.stage_train(cfg, args.out, cfg.train.ablation, resume=args.resume,
                         progress=_progress() if args.verbose else None)
    print(f"checkpoint in {Path(args.out) / ('train_' + cfg.train.ablation)}")
    return 0


def cmd_retarget(args) -> int:
    cfg = _load_cfg(args)
    model = pipeline.load_model(args.out, cfg, args.ablation or "full")
    fitter = pipeline.load_fitter(args.out, cfg)
    source = data_mod.load_image(args.source)
    driver = data_mod.load_image(args.driver)
    from .training import retarget, retarget_from_driver
    if args.driver_landmarks:
        out = retarget(model, source, data_mod.load_image(args.driver_landmarks),
                       data_mod.load_mask(args.source_mask), data_mod.load_mask(args.driver_mask),
                       n_steps=cfg.diffusion.n_steps, seed=cfg.train.seed)
    else:
        out = retarget_from_driver(model, source, driver, fitter,
                                   data_mod.load_mask(args.source_mask),
                                   data_mod.load_mask(args.driver_mask),
                                   n_steps=cfg.diffusion.n_steps, seed=cfg.train.seed)
    data_mod.save_image(out, Path(args.output))
    print(f"wrote {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    protocols = {"self": ("self",), "cross": ("cross_id",), "both": ("self", "cross_id")}[args.protocol]
    results = pipeline.stage_evaluate(cfg, args.out, args.ablation or "full", protocols)
    print(json.dumps(results, indent=1))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    ablations = args.ablations.split(",")
    pipeline.run_pipeline(cfg, args.out, ablations=ablations)
    for ab in ablations:
        path = Path(args.out) / "eval" / f"report_{ab}_self.json"
        print(f"[{ab}] {path.read_text().strip()}")
    return 0


def grid_image(triplets: list, labels=("source", "driver", "output")):
    """Tile (source, driver, output) image triplets into one row per triplet.

    Returns (grid HxWx3 array, layout dict). All images must share one size.
    """
    sizes = {im.shape for t in triplets for im in t}
    if len(sizes) != 1:
        raise ValueError(f"mixed image sizes: {sorted(sizes)}")
    h, w, _ = next(iter(sizes))
    pad = 2
    rows, cols = len(triplets), len(labels)
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), dtype=np.float32)
    layout = {"rows": rows, "cols": cols, "labels": list(labels), "cells": []}
    for r, t in enumerate(triplets):
        for c, im in enumerate(t):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[y:y + h, x:x + w] = im
            layout["cells"].append({"row": r, "col": c, "label": labels[c]})
    return grid, layout


def cmd_grid(args) -> int:
    with open(args.manifest) as f:
        entries = json.load(f)
    base = Path(args.manifest).parent
    triplets = [[data_mod.load_image(base / e[k]) for k in ("source", "driver", "output")]
                for e in entries]
    grid, layout = grid_image(triplets)
    data_mod.save_image(grid, Path(args.output))
    with open(Path(args.output).with_suffix(".layout.json"), "w") as f:
        json.dump(layout, f, indent=1)
    print(f"wrote {args.output} ({layout['rows']}x{layout['cols']})")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    ablations = args.ablations.split(",") if args.ablations else ["full"]
    pipeline.run_pipeline(cfg, args.out, ablations=ablations, force=args.force,
                          progress=_progress() if args.verbose else None)
    print("pipeline complete")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faceshift",
                                description="cross-domain face retargeting, desk scale")
    p.add_argument("--config", type=Path, default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="torch thread count")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain-oracles").set_defaults(fn=cmd_pretrain_oracles)

    g = sub.add_parser("gen-data")
    g.add_argument("--identities", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)

    a = sub.add_parser("augment")
    a.add_argument("--gamma", type=float, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--filter-threshold", type=float, default=None, dest="filter_threshold")
    a.set_defaults(fn=cmd_augment)

    t = sub.add_parser("train")
    t.add_argument("--ablation", choices=["full", "C1", "C2"], default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("retarget")
    r.add_argument("--source", required=True)
    r.add_argument("--driver", required=True)
    r.add_argument("--driver-landmarks", default=None, dest="driver_landmarks")
    r.add_argument("--source-mask", required=True, dest="source_mask")
    r.add_argument("--driver-mask", required=True, dest="driver_mask")
    r.add_argument("--ablation", default=None)
    r.add_argument("--output", required=True)
    r.set_defaults(fn=cmd_retarget)

    e = sub.add_parser("evaluate")
    e.add_argument("--protocol", choices=["self", "cross", "both"], default="both")
    e.add_argument("--ablation", default=None)
    e.set_defaults(fn=cmd_evaluate)

    ab = sub.add_parser("ablate")
    ab.add_argument("--ablations", default="full,C1,C2")
    ab.set_defaults(fn=cmd_ablate)

    gr = sub.add_parser("grid")
    gr.add_argument("--manifest", required=True, help="JSON list of {source, driver, output} paths")
    gr.add_argument("--output", required=True)
    gr.set_defaults(fn=cmd_grid)

    pl = sub.add_parser("pipeline")
    pl.add_argument("--ablations", default=None)
    pl.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs:
        import torch
        torch.set_num_threads(args.jobs)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pipeline.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
