"""End-to-end pipeline stages with completion markers.

Stages: oracles (fitter + recognizer) -> base (unconditional denoiser) ->
data (render splits) -> augment (stylize the train split) -> train (per
ablation) -> evaluate. Each stage writes a `<stage>.done` marker recording
the config hash; a rerun with the same hash skips completed stages, and a
mismatched hash refuses to compose rather than silently mixing artifacts.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import data as data_mod
from . import faces
from .conditioning import RecognizerNet, pretrain_recognizer
from .config import RunConfig, denoiser_config, face_space_spec
from .diffusion import Denoiser, pretrain_base
from .fitter import FitterNet, FitterParams, pretrain_fitter
from .metrics import FeatureNet, MetricReport, ProtocolCase, run_protocol
from .style_transfer import StyleInjectionConfig, augment_dataset
from .training import RetargetModel, retarget_batch, run_training
from .utils import derive_seed


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def _marker(out: Path, name: str) -> Path:
    return Path(out) / f"{name}.done"


def stage_done(out: Path, name: str, cfg: RunConfig) -> bool:
    m = _marker(out, name)
    if not m.exists():
        return False
    try:
        return json.loads(m.read_text()).get("config_hash") == cfg.hash()
    except (json.JSONDecodeError, OSError):
        return False


def _mark(out: Path, name: str, cfg: RunConfig) -> None:
    _marker(out, name).write_text(json.dumps(
        {"config_hash": cfg.hash(), "completed_at": time.time()}))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_oracles(cfg: RunConfig, out: Path, progress=None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if stage_done(out, "oracles", cfg):
        return
    spec = face_space_spec(cfg)
    meta = {"config_hash": cfg.hash()}
    fitter, fh = pretrain_fitter(spec=spec, seed=cfg.train.seed,
                                 steps=cfg.conditioning.fitter_steps,
                                 pool_size=cfg.conditioning.fitter_pool)
    ckpt.save_module(out / "oracles" / "fitter", fitter.net, {**meta, "history": fh})
    recognizer, rh = pretrain_recognizer(
        n_identities=cfg.conditioning.recognizer_identities, spec=spec,
        seed=cfg.train.seed, steps=cfg.conditioning.recognizer_steps,
        variants=cfg.conditioning.recognizer_variants, d_id=cfg.conditioning.d_id)
    ckpt.save_module(out / "oracles" / "recognizer", recognizer, {**meta, "history": rh})
    _mark(out, "oracles", cfg)


def load_fitter(out: Path, cfg: RunConfig) -> FitterParams:
    net = FitterNet()
    ckpt.load_module(Path(out) / "oracles" / "fitter", net, expect_hash=cfg.hash())
    net.eval()
    return FitterParams(net=net, spec=face_space_spec(cfg))


def load_recognizer(out: Path, cfg: RunConfig) -> RecognizerNet:
    net = RecognizerNet(d_id=cfg.conditioning.d_id)
    ckpt.load_module(Path(out) / "oracles" / "recognizer", net, expect_hash=cfg.hash())
    net.eval()
    return net


def stage_base(cfg: RunConfig, out: Path, progress=None) -> None:
    out = Path(out)
    if stage_done(out, "base", cfg):
        return
    dc = cfg.diffusion
    model, losses = pretrain_base(
        cfg=denoiser_config(cfg), spec=face_space_spec(cfg), seed=cfg.train.seed,
        steps=dc.pretrain_steps, batch=dc.pretrain_batch, lr=dc.pretrain_lr,
        pool_size=dc.pretrain_pool, progress=progress)
    ckpt.save_module(out / "base" / "denoiser", model, {
        "config_hash": cfg.hash(),
        "final_loss": float(np.mean(losses[-100:])),
    })
    _mark(out, "base", cfg)


def load_base(out: Path, cfg: RunConfig) -> Denoiser:
    model = Denoiser(denoiser_config(cfg))
    ckpt.load_module(Path(out) / "base" / "denoiser", model, expect_hash=cfg.hash())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def stage_data(cfg: RunConfig, out: Path, progress=None) -> None:
    out = Path(out)
    if stage_done(out, "data", cfg):
        return
    spec = face_space_spec(cfg)
    d = cfg.data
    data_mod.generate_split(out / "data", "train", d.identities_train, d.sequences_train,
                            d.frames_train, d.train_styles, spec, d.image_format, seed=cfg.train.seed)
    data_mod.generate_split(out / "data", "test", d.identities_test, d.sequences_test,
                            d.frames_test, d.test_styles, spec, d.image_format, seed=cfg.train.seed)
    _mark(out, "data", cfg)


def stage_augment(cfg: RunConfig, out: Path, progress=None) -> dict:
    out = Path(out)
    stats_path = out / "augmented" / "stats.json"
    if stage_done(out, "augment", cfg):
        return json.loads(stats_path.read_text())
    spec = face_space_spec(cfg)
    model = load_base(out, cfg)
    fitter = load_fitter(out, cfg)
    records = data_mod.read_manifest(out / "data" / "train.jsonl")
    bank = faces.style_bank(cfg.augment.styles, spec)
    sic = StyleInjectionConfig(
        gamma=cfg.augment.gamma, n_steps=cfg.augment.n_steps,
        filter_threshold=cfg.augment.filter_threshold)
    aug_records, stats = augment_dataset(
        records, out / "data", bank, sic, fitter, model, out / "augmented",
        image_format=cfg.data.image_format, batch_size=cfg.augment.batch_size)
    data_mod.write_manifest(aug_records, out / "augmented" / "augmented.jsonl")

    # combined training manifest (originals + surviving stylizations),
    # with original paths rebased onto the augmented directory
    combined = list(aug_records)
    for r in records:
        combined.append(data_mod.FrameRecord(**{
            **r.__dict__,
            "image": os.path.relpath(out / "data" / r.image, out / "augmented"),
            "landmarks": os.path.relpath(out / "data" / r.landmarks, out / "augmented"),
            "mask": os.path.relpath(out / "data" / r.mask, out / "augmented"),
        }))
    data_mod.write_manifest(combined, out / "augmented" / "combined.jsonl")
    stats_path.write_text(json.dumps(stats))
    _mark(out, "augment", cfg)
    return stats


def stage_train(cfg: RunConfig, out: Path, ablation: str = "full", progress=None,
                resume: bool = False) -> None:
    out = Path(out)
    stage = f"train_{ablation}"
    if stage_done(out, stage, cfg):
        return
    denoiser = load_base(out, cfg)
    recognizer = load_recognizer(out, cfg)
    model = RetargetModel(cfg, denoiser, recognizer, seed=cfg.train.seed, ablation=ablation)
    records = data_mod.read_manifest(out / "augmented" / "combined.jsonl")
    run_training(cfg, model, records, out / "augmented", out_dir=out / stage,
                 progress=progress, resume=resume)
    _mark(out, stage, cfg)


def load_model(out: Path, cfg: RunConfig, ablation: str = "full") -> RetargetModel:
    return RetargetModel.load(Path(out) / f"train_{ablation}" / "checkpoint", cfg)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def build_eval_cases(
    cfg: RunConfig,
    protocol: str,
    n_cases: int,
    seed: int,
    style_ids=None,
    min_curvature_gap: float = 0.0,
) -> list:
    """Oracle-rendered evaluation cases over held-out (test split) identities.

    Self protocol: driver shares identity and style with the source, so the
    driver frame is the reconstruction target. Cross protocol: driver is a
    different identity (ground truth undefined). `min_curvature_gap` forces a
    minimum |smile difference| between source and driver expressions.
    """
    spec = face_space_spec(cfg)
    styles = list(style_ids) if style_ids is not None else list(cfg.data.test_styles)
    n_ids = cfg.data.identities_test
    cases = []
    for k in range(n_cases):
        rng = np.random.default_rng(derive_seed("eval-case", seed, protocol, k))
        style = styles[k % len(styles)]
        src_idx = int(rng.integers(n_ids))
        src_id = faces.sample_identity(src_idx, "test", spec)
        exp_s = faces.sample_expression(rng, spec)
        exp_d = faces.sample_expression(rng, spec)
        if min_curvature_gap > 0.0:
            exp_s[0] = rng.uniform(-1.0, -min_curvature_gap / 2)
            exp_d[0] = exp_s[0] + min_curvature_gap + rng.uniform(0, 1.0 - min_curvature_gap / 2 + exp_s[0])
            exp_d[0] = min(exp_d[0], 1.0)
        src_scene = faces.FaceScene(src_id, exp_s, faces.sample_pose(rng, spec), style,
                                    seed=derive_seed("eval-src", seed, k))
        if protocol == "self":
            drv_scene = faces.FaceScene(src_id, exp_d, faces.sample_pose(rng, spec), style,
                                        seed=derive_seed("eval-drv", seed, k))
        else:
            other_idx = (src_idx + 1 + int(rng.integers(n_ids - 1))) % n_ids
            other = faces.sample_identity(other_idx, "test", spec)
            drv_scene = faces.FaceScene(other, exp_d, faces.sample_pose(rng, spec),
                                        int(rng.integers(spec.n_styles)),
                                        seed=derive_seed("eval-drv", seed, k))
        distractor_idx = (src_idx + 1 + int(rng.integers(n_ids - 1))) % n_ids
        distractor_id = faces.sample_identity(distractor_idx, "test", spec)
        distractor = faces.FaceScene(distractor_id, faces.sample_expression(rng, spec),
                                     faces.sample_pose(rng, spec), style,
                                     seed=derive_seed("eval-dis", seed, k))
        drv_img = faces.render(drv_scene, spec)
        cases.append(ProtocolCase(
            source_img=faces.render(src_scene, spec),
            driver_img=drv_img,
            driver_landmarks=faces.render_landmarks(drv_scene, spec),
            source_mask=faces.render_mask(src_scene, spec),
            driver_mask=faces.render_mask(drv_scene, spec),
            ground_truth=drv_img if protocol == "self" else None,
            meta={
                "style_id": style,
                "source_scene": src_scene,
                "driver_scene": drv_scene,
                "distractor_img": faces.render(distractor, spec),
            },
        ))
    return cases


def generate_outputs(model: RetargetModel, cases: list, n_steps: int = 50,
                     seed: int = 0, batch: int = 25) -> list:
    outs = []
    for lo in range(0, len(cases), batch):
        chunk = cases[lo:lo + batch]
        outs.extend(retarget_batch(
            model,
            [c.source_img for c in chunk],
            [c.driver_landmarks for c in chunk],
            [c.source_mask for c in chunk],
            [c.driver_mask for c in chunk],
            n_steps=n_steps, seed=derive_seed("eval-noise", seed, lo)))
    return outs


def stage_evaluate(cfg: RunConfig, out: Path, ablation: str = "full",
                   protocols=("self", "cross_id"), progress=None) -> dict:
    out = Path(out)
    results = {}
    model = None
    for protocol in protocols:
        stage = f"evaluate_{ablation}_{protocol}"
        report_path = out / "eval" / f"report_{ablation}_{protocol}.json"
        if stage_done(out, stage, cfg):
            results[protocol] = json.loads(report_path.read_text())
            continue
        if model is None:
            model = load_model(out, cfg, ablation)
            fitter = load_fitter(out, cfg)
            recognizer = load_recognizer(out, cfg)
            featnet = FeatureNet(seed=cfg.metrics.featnet_seed)
        cases = build_eval_cases(cfg, protocol, cfg.metrics.eval_cases, cfg.metrics.eval_seed)
        outputs = generate_outputs(model, cases, n_steps=cfg.diffusion.n_steps, seed=cfg.metrics.eval_seed)
        by_id = {id(c): o for c, o in zip(cases, outputs)}
        report = run_protocol(
            lambda c: by_id[id(c)], cases, protocol, recognizer, fitter, featnet,
            confidence_floor=cfg.metrics.confidence_floor, config_hash=cfg.hash())
        report.save(report_path)
        results[protocol] = report.to_dict()
        _mark(out, stage, cfg)
    return results


_STAGES = ("oracles", "base", "data", "augment", "train", "evaluate")


def run_pipeline(cfg: RunConfig, out: Path, ablations=("full",), force: bool = False,
                 progress=None) -> None:
    """Run all stages in order; completed stages (matching config hash) skip."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if force:
        for m in out.glob("*.done"):
            m.unlink()
    cfg.save(out / "config.json")
    plan = [("oracles", lambda: stage_oracles(cfg, out, progress)),
            ("base", lambda: stage_base(cfg, out, progress)),
            ("data", lambda: stage_data(cfg, out, progress)),
            ("augment", lambda: stage_augment(cfg, out, progress))]
    for ab in ablations:
        plan.append((f"train_{ab}", lambda ab=ab: stage_train(cfg, out, ab, progress)))
        plan.append((f"evaluate_{ab}", lambda ab=ab: stage_evaluate(cfg, out, ab, progress=progress)))
    for name, fn in plan:
        try:
            fn()
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, str(e)) from e
