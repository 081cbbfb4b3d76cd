"""Joint fine-tuning of the conditioning pathway and inference-time retargeting.

Trainable groups: identity projector, style patch embedder + projector,
control branch, LoRA offsets. Frozen: base denoiser, recognizer, fitter.
Training pairs are same-identity, same-style frames differing in expression
or pose; the target frame supplies the noised input and the spatial
composite, the source frame supplies identity and style conditioning.

Ablations:
    full - identity tokens to the denoiser; style tokens into the control branch.
    C1   - style tokens concatenated onto the identity tokens and fed to the
           denoiser directly; the control branch sees only the composite.
    C2   - full wiring but no LoRA (base denoiser entirely untouched).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import data as data_mod
from .conditioning import (
    ControlBranch,
    SpatialComposite,
    TokenSequence,
    build_spatial_composite,
    make_identity_projector,
    make_style_encoder,
    make_style_projector,
    project_identity,
    project_style,
)
from .config import RunConfig, denoiser_config
from .diffusion import Denoiser, add_noise, ddim_sample, to_latent, from_latent
from .lora import LoraSet, lora_shapes
from .utils import batch_to_tensor, derive_seed, img_to_tensor, torch_gen


@dataclass
class TrainingPair:
    source_img: np.ndarray
    target_img: np.ndarray
    composite: SpatialComposite
    f_id: torch.Tensor
    source_ref: str
    target_ref: str
    identity_id: int
    style_id: int


class PairIndex:
    """Uniform sampler over eligible (source, target) ordered pairs.

    Eligible: same identity and style, different frame, expression or pose
    factors differ. Groups with a single frame contribute nothing.
    """

    def __init__(self, records: list):
        self.records = records
        self.pairs = []
        for (ident, style), idxs in data_mod.group_by_identity_style(records).items():
            for i in idxs:
                for j in idxs:
                    if i == j:
                        continue
                    ri, rj = records[i], records[j]
                    if ri.expression_factors != rj.expression_factors or ri.pose_factors != rj.pose_factors:
                        self.pairs.append((i, j))
        if not self.pairs:
            raise ValueError("manifest has no eligible training pairs")

    def sample_indices(self, rng: np.random.Generator):
        return self.pairs[int(rng.integers(len(self.pairs)))]


class FrameStore:
    """In-memory cache of decoded frames plus precomputed identity embeddings."""

    def __init__(self, records: list, base_dir: Path, recognizer):
        self.base_dir = Path(base_dir)
        self._img, self._lm, self._mask = {}, {}, {}
        for r in records:
            if r.image not in self._img:
                self._img[r.image] = data_mod.load_image(self.base_dir / r.image)
            if r.landmarks not in self._lm:
                self._lm[r.landmarks] = data_mod.load_image(self.base_dir / r.landmarks)
            if r.mask not in self._mask:
                self._mask[r.mask] = data_mod.load_mask(self.base_dir / r.mask)
        paths = sorted(self._img)
        embs = []
        with torch.no_grad():
            for lo in range(0, len(paths), 64):
                embs.append(recognizer(batch_to_tensor([self._img[p] for p in paths[lo:lo + 64]])))
        self._fid = dict(zip(paths, torch.cat(embs)))

    def image(self, ref):
        return self._img[ref]

    def landmarks(self, ref):
        return self._lm[ref]

    def mask(self, ref):
        return self._mask[ref]

    def f_id(self, ref):
        return self._fid[ref]


def sample_pair(index: PairIndex, store: FrameStore, rng: np.random.Generator) -> TrainingPair:
    i, j = index.sample_indices(rng)
    src, tgt = index.records[i], index.records[j]
    comp = build_spatial_composite(
        store.landmarks(tgt.landmarks), store.mask(src.mask), store.mask(tgt.mask))
    return TrainingPair(
        source_img=store.image(src.image), target_img=store.image(tgt.image),
        composite=comp, f_id=store.f_id(src.image),
        source_ref=src.image, target_ref=tgt.image,
        identity_id=src.identity_id, style_id=src.style_id,
    )


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

class RetargetModel:
    """Frozen base denoiser + recognizer with the trainable conditioning stack."""

    def __init__(self, cfg: RunConfig, denoiser: Denoiser, recognizer, seed: int = 0,
                 ablation: str | None = None):
        self.cfg = cfg
        self.ablation = ablation or cfg.train.ablation
        self.denoiser = denoiser
        self.recognizer = recognizer
        cc = cfg.conditioning
        self.p_id = make_identity_projector(cc.d_id, cc.d_text, cc.n_id_tokens, seed=derive_seed("pid", seed))
        self.e_sty = make_style_encoder(cc.d_text, seed=derive_seed("esty", seed), pos_encoding=cc.pos_encoding)
        self.p_sty = make_style_projector(cc.d_text, cc.n_sty_tokens, seed=derive_seed("psty", seed))
        torch.manual_seed(derive_seed("control", seed))
        self.control = ControlBranch(denoiser)
        if self.ablation == "C2":
            self.lora = None
        else:
            self.lora = LoraSet(lora_shapes(denoiser), rank=cfg.lora.rank, alpha=cfg.lora.alpha,
                                seed=derive_seed("lora", seed))

    def trainable_modules(self) -> dict:
        mods = {"p_id": self.p_id, "e_sty": self.e_sty, "p_sty": self.p_sty, "control": self.control}
        if self.lora is not None:
            mods["lora"] = self.lora
        return mods

    def parameters(self):
        for m in self.trainable_modules().values():
            yield from m.parameters()

    def encode_source(self, source_imgs: torch.Tensor):
        """(main_tokens, control_tokens) for a batch of source images."""
        with torch.no_grad():
            f_id = self.recognizer(source_imgs)
        return self.tokens_from(f_id, source_imgs)

    def tokens_from(self, f_id: torch.Tensor, source_imgs: torch.Tensor):
        c_id = project_identity(self.p_id, f_id).batched()
        patch, glob = self.e_sty(source_imgs)
        c_sty = project_style(self.p_sty, patch, glob).batched()
        if self.ablation == "C1":
            main = torch.cat([c_id, c_sty], dim=1)
            ctrl = None  # branch sees the composite only (null tokens)
        else:
            main = c_id
            ctrl = c_sty
        return main, ctrl

    # -- persistence ---------------------------------------------------------

    def save(self, out_dir: Path, step: int | None = None) -> None:
        out_dir = Path(out_dir)
        meta = {"config_hash": self.cfg.hash(), "ablation": self.ablation}
        if step is not None:
            meta["step"] = step
        ckpt.save_module(out_dir / "denoiser", self.denoiser,
                         {**meta, "schedule": {"T": self.denoiser.schedule.T}})
        ckpt.save_module(out_dir / "recognizer", self.recognizer, meta)
        for name in ("p_id", "e_sty", "p_sty", "control"):
            ckpt.save_module(out_dir / name, getattr(self, name), meta)
        if self.lora is not None:
            ckpt.save_module(out_dir / "lora", self.lora,
                             {**meta, "base_config_hash": self.cfg.hash()})

    @classmethod
    def load(cls, in_dir: Path, cfg: RunConfig, recognizer_cls=None) -> "RetargetModel":
        from .conditioning import RecognizerNet
        in_dir = Path(in_dir)
        denoiser = Denoiser(denoiser_config(cfg))
        meta = ckpt.load_module(in_dir / "denoiser", denoiser, expect_hash=cfg.hash())
        recognizer = RecognizerNet(d_id=cfg.conditioning.d_id)
        ckpt.load_module(in_dir / "recognizer", recognizer, expect_hash=cfg.hash())
        model = cls(cfg, denoiser, recognizer, ablation=meta.get("ablation"))
        for name in ("p_id", "e_sty", "p_sty", "control"):
            ckpt.load_module(in_dir / name, getattr(model, name), expect_hash=cfg.hash())
        if model.lora is not None:
            lmeta = ckpt.load_module(in_dir / "lora", model.lora)
            if lmeta.get("base_config_hash") != cfg.hash():
                raise ckpt.CheckpointMismatch("LoRA checkpoint references a different base config")
        for p in list(denoiser.parameters()) + list(recognizer.parameters()):
            p.requires_grad_(False)
        return model


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: RetargetModel
    opt: torch.optim.Optimizer
    step: int = 0
    losses: list = field(default_factory=list)


def make_state(model: RetargetModel) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=model.cfg.train.learning_rate)
    return TrainState(model=model, opt=opt)


def training_step(state: TrainState, pairs, t, eps) -> tuple[TrainState, float]:
    """One Adam step on the noise-prediction objective over a pair batch.

    `pairs` may be one TrainingPair or a list; `t` and `eps` must match the
    batch size ((B,) timesteps, (B,3,H,W) unit noise).
    """
    model = state.model
    if isinstance(pairs, TrainingPair):
        pairs = [pairs]
    if not torch.is_tensor(t):
        t = torch.full((len(pairs),), int(t), dtype=torch.long)
    x0 = torch.stack([to_latent(p.target_img) for p in pairs])
    x_t = add_noise(x0, eps, t, model.denoiser.schedule)
    src = batch_to_tensor([p.source_img for p in pairs])
    f_id = torch.stack([p.f_id for p in pairs])
    main_tokens, ctrl_tokens = model.tokens_from(f_id, src)
    comp = torch.stack([p.composite.tensor() for p in pairs])
    residuals = model.control(comp, ctrl_tokens, x_t, t)
    from .diffusion import ForwardCtx
    ctx = ForwardCtx(lora=model.lora, control=residuals)
    eps_hat = model.denoiser(x_t, t, main_tokens, ctx)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {state.step} "
            f"(pairs {[p.source_ref for p in pairs]}, t={t.tolist()})")
    state.opt.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), model.cfg.train.grad_clip)
    state.opt.step()
    state.step += 1
    state.losses.append(float(loss.detach()))
    return state, float(loss.detach())


def _save_optimizer(out_dir: Path, state: TrainState) -> None:
    arrays = {}
    adam_step = 0
    for i, p in enumerate(state.model.parameters()):
        st = state.opt.state.get(p, {})
        if "exp_avg" in st:
            arrays[f"p{i:04d}.exp_avg"] = st["exp_avg"].numpy()
            arrays[f"p{i:04d}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            adam_step = int(st["step"])
    ckpt.save_arrays(out_dir, arrays, {"step": state.step, "adam_step": adam_step})


def _load_optimizer(in_dir: Path, state: TrainState) -> int:
    arrays, meta = ckpt.load_arrays(in_dir)
    for i, p in enumerate(state.model.parameters()):
        key = f"p{i:04d}.exp_avg"
        if key in arrays:
            state.opt.state[p] = {
                "step": torch.tensor(float(meta["adam_step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"p{i:04d}.exp_avg_sq"].copy()),
            }
    return int(meta["step"])


def run_training(
    cfg: RunConfig,
    model: RetargetModel,
    records: list,
    base_dir: Path,
    out_dir: Path | None = None,
    progress=None,
    resume: bool = False,
) -> tuple[RetargetModel, list]:
    """Full training loop: deterministic given cfg.train.seed (per-step derived
    noise streams, so a resumed run matches an uninterrupted one); writes
    periodic checkpoints and a loss log when out_dir is given."""
    tc = cfg.train
    index = PairIndex(records)
    store = FrameStore(records, base_dir, model.recognizer)
    state = make_state(model)
    T = model.denoiser.schedule.T
    log_rows = []
    start_step = 0
    if resume and out_dir is not None and (Path(out_dir) / "checkpoint" / "optimizer" / "manifest.json").exists():
        loaded = RetargetModel.load(Path(out_dir) / "checkpoint", cfg)
        for name, mod in loaded.trainable_modules().items():
            getattr(model, name).load_state_dict(mod.state_dict())
        start_step = _load_optimizer(Path(out_dir) / "checkpoint" / "optimizer", state)
        state.step = start_step
        log_path = Path(out_dir) / "loss.csv"
        if log_path.exists():
            with open(log_path) as f:
                log_rows = [(int(r["step"]), float(r["loss"]), float(r["lr"]), float(r["wall_time"]))
                            for r in csv.DictReader(f) if int(r["step"]) < start_step]
    t_start = time.time()
    for step in range(start_step, tc.total_steps):
        rng = np.random.default_rng(derive_seed("train-pairs", tc.seed, step))
        pairs = [sample_pair(index, store, rng) for _ in range(tc.batch_size)]
        gen = torch_gen(derive_seed("train-noise", tc.seed, step))
        t = torch.randint(0, T, (tc.batch_size,), generator=gen)
        eps = torch.randn(len(pairs), *to_latent(pairs[0].target_img).shape, generator=gen)
        state, loss = training_step(state, pairs, t, eps)
        if step % tc.log_every == 0 or step == tc.total_steps - 1:
            log_rows.append((step, loss, tc.learning_rate, time.time() - t_start))
            if progress:
                progress(step, loss)
        if out_dir is not None and ((step + 1) % tc.ckpt_every == 0 or step == tc.total_steps - 1):
            model.save(Path(out_dir) / "checkpoint", step=step + 1)
            _save_optimizer(Path(out_dir) / "checkpoint" / "optimizer", state)
            _write_loss_log(Path(out_dir) / "loss.csv", log_rows)
    if out_dir is not None:
        _write_loss_log(Path(out_dir) / "loss.csv", log_rows)
    return model, state.losses


def _write_loss_log(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr", "wall_time"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def retarget_batch(
    model: RetargetModel,
    source_imgs: list,
    driver_landmarks: list,
    source_masks: list,
    driver_masks: list,
    n_steps: int = 50,
    seed: int = 0,
) -> list:
    """Generate retargeted images for a batch of cases from seeded unit noise."""
    src = batch_to_tensor(source_imgs)
    main_tokens, ctrl_tokens = model.encode_source(src)
    comps = torch.stack([
        build_spatial_composite(lm, ms, md).tensor()
        for lm, ms, md in zip(driver_landmarks, source_masks, driver_masks)
    ])
    size = model.denoiser.cfg.image_size
    z_T = torch.randn(len(source_imgs), 3, size, size, generator=torch_gen(derive_seed("retarget", seed)))

    def control_fn(x_t, t):
        return model.control(comps, ctrl_tokens, x_t, t)

    out = ddim_sample(model.denoiser, model.lora, z_T, main_tokens, control=control_fn,
                      n_steps=n_steps, clip_x0=True)
    return [from_latent(out[i]) for i in range(out.shape[0])]


def retarget(model: RetargetModel, source_img: np.ndarray, driver_landmarks: np.ndarray,
             mask_src: np.ndarray, mask_tgt: np.ndarray, n_steps: int = 50, seed: int = 0) -> np.ndarray:
    return retarget_batch(model, [source_img], [driver_landmarks], [mask_src], [mask_tgt],
                          n_steps=n_steps, seed=seed)[0]


def retarget_from_driver(model: RetargetModel, source_img: np.ndarray, driver_img: np.ndarray,
                         fitter, mask_src: np.ndarray, mask_tgt: np.ndarray,
                         n_steps: int = 50, seed: int = 0,
                         confidence_floor: float = 0.5) -> np.ndarray:
    """Retarget when no landmark render is available: fit the driver's
    expression/pose and render landmarks on the mean head geometry."""
    from . import faces
    from .fitter import fit_coefficients
    exp, pose, conf = fit_coefficients(driver_img, fitter)
    if conf < confidence_floor:
        raise RuntimeError(f"fitter not confident on driver image ({conf:.3f} < {confidence_floor})")
    scene = faces.FaceScene(
        identity_factors=np.zeros(8),
        expression_factors=np.clip(exp, -1, 1),
        pose_factors=np.clip(pose, [-0.3, -0.1, -0.1], [0.3, 0.1, 0.1]),
        style_id=0, seed=0,
    )
    return retarget(model, source_img, faces.render_landmarks(scene), mask_src, mask_tgt,
                    n_steps=n_steps, seed=seed)
