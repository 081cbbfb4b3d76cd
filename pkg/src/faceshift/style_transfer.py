"""Training-free style transfer: AdaIN latent init, query blending, attention
injection, and the filtered dataset-augmentation pipeline.

The three kernels here are the core math. `stylize` wires them into the
diffusion model: invert content and style images with attention caching, fuse
the inverted latents with AdaIN, then resample while injecting the style
image's cached keys/values into the decoder self-attention layers, with
queries blended toward the content image's cached queries by `gamma`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from . import faces
from .utils import derive_seed


def adain_latents(z_c: torch.Tensor, z_s: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Re-normalize z_c's per-channel statistics to match z_s's.

    Statistics are population mean/std per channel over spatial positions.
    Accepts (C, H, W) or (B, C, H, W); shapes must match.
    """
    if z_c.shape != z_s.shape:
        raise ValueError(f"shape mismatch: {tuple(z_c.shape)} vs {tuple(z_s.shape)}")
    dims = tuple(range(z_c.ndim - 2, z_c.ndim))
    zc, zs = z_c.double(), z_s.double()
    mu_c = zc.mean(dim=dims, keepdim=True)
    mu_s = zs.mean(dim=dims, keepdim=True)
    sd_c = zc.std(dim=dims, keepdim=True, unbiased=False).clamp_min(eps)
    sd_s = zs.std(dim=dims, keepdim=True, unbiased=False)
    return (sd_s * (zc - mu_c) / sd_c + mu_s).to(z_c.dtype)


def blend_queries(q_c: torch.Tensor, q_cs: torch.Tensor, gamma: float) -> torch.Tensor:
    """Convex mix of content queries and current stylized-path queries."""
    if q_c.shape != q_cs.shape:
        raise ValueError(f"shape mismatch: {tuple(q_c.shape)} vs {tuple(q_cs.shape)}")
    return gamma * q_c + (1.0 - gamma) * q_cs


def inject_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v.  q: (B, N, d); k, v: (B or 1, M, d).

    This is the single attention kernel used everywhere: plain self/cross
    attention passes its own (q, k, v); style injection passes blended queries
    with the style image's cached keys/values.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key/value row counts differ")
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ValueError("query/key/value dims differ")
    if k.ndim == 3 and q.ndim == 3 and k.shape[0] == 1 and q.shape[0] > 1:
        k = k.expand(q.shape[0], -1, -1)
        v = v.expand(q.shape[0], -1, -1)
    attn = torch.softmax(q @ k.transpose(-1, -2) / (q.shape[-1] ** 0.5), dim=-1)
    return attn @ v


@dataclass
class StyleInjectionConfig:
    gamma: float = 0.8
    injected_layer_ids: tuple = ("dec8.self", "dec16.self")
    n_steps: int = 50
    filter_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Stylization pipeline
# ---------------------------------------------------------------------------

def invert_for_injection(model, imgs: list, cfg: StyleInjectionConfig):
    from . import diffusion
    x0 = torch.stack([diffusion.to_latent(im) for im in imgs])
    bad = [i for i, lid in enumerate(cfg.injected_layer_ids) if lid not in model.cached_layer_ids]
    if bad:
        raise ValueError(f"unknown injected layer ids: {[cfg.injected_layer_ids[i] for i in bad]}")
    return diffusion.ddim_invert(model, x0, None, n_steps=cfg.n_steps, record_cache=True)


def stylize_batch(contents: list, style_img: np.ndarray, cfg: StyleInjectionConfig, model,
                  style_inversion=None, content_inversion=None, clip_x0: bool = True) -> list:
    """Stylize a batch of content images with one style exemplar.

    `style_inversion` / `content_inversion` may carry precomputed (z_T, cache)
    pairs so inversions can be shared across calls (style exemplars across
    batches, content batches across gamma values). The AdaIN'd start latent is
    slightly off the inversion trajectory, so the resampling clamps predicted
    clean latents by default.
    """
    from . import diffusion
    zc_T, cache_c = content_inversion or invert_for_injection(model, contents, cfg)
    if style_inversion is None:
        style_inversion = invert_for_injection(model, [style_img], cfg)
    zs_T, cache_s = style_inversion
    z0 = adain_latents(zc_T, zs_T.expand(zc_T.shape[0], -1, -1, -1))
    out = diffusion.ddim_sample(
        model, None, z0, None, n_steps=cfg.n_steps,
        cache_mode="inject", cache=cache_c,
        injection=diffusion.InjectionSpec(
            gamma=cfg.gamma, layer_ids=tuple(cfg.injected_layer_ids), style_cache=cache_s),
        clip_x0=clip_x0,
    )
    return [diffusion.from_latent(out[i]) for i in range(out.shape[0])]


def stylize(content: np.ndarray, style: np.ndarray, cfg: StyleInjectionConfig, model) -> np.ndarray:
    return stylize_batch([content], style, cfg, model)[0]


def invert_style_bank(style_bank: dict, cfg: StyleInjectionConfig, model) -> dict:
    return {sid: invert_for_injection(model, [img], cfg) for sid, img in sorted(style_bank.items())}


def augment_dataset(
    records: list,
    data_dir,
    style_bank: dict,
    cfg: StyleInjectionConfig,
    fitter,
    model,
    out_dir,
    image_format: str = "png",
    batch_size: int = 16,
) -> tuple[list, dict]:
    """Stylize every source frame with every style exemplar, filter, and emit
    an augmented manifest.

    Runs strictly as preprocessing: outputs are written to disk and referenced
    by new records that keep the source frame's factor vectors verbatim.
    Outputs whose fitter confidence falls below cfg.filter_threshold are
    dropped; the stats dict accounts for every (frame, style) pair.
    """
    import os
    from pathlib import Path

    from .fitter import fit_batch

    if not style_bank:
        raise ValueError("empty style bank")
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "png" if image_format == "png" else "ppm"
    bank_inv = invert_style_bank(style_bank, cfg, model)

    def rel(p):  # landmark/mask files stay in the source dataset directory
        return os.path.relpath(data_dir / p, out_dir)

    emitted, rejected = [], 0
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        contents = [data_mod.load_image(data_dir / r.image) for r in chunk]
        chunk_inv = invert_for_injection(model, contents, cfg)
        for sid in sorted(style_bank):
            outs = stylize_batch(contents, style_bank[sid], cfg, model,
                                 style_inversion=bank_inv[sid], content_inversion=chunk_inv)
            _, _, confs = fit_batch(outs, fitter)
            for r, img, conf in zip(chunk, outs, confs):
                if conf < cfg.filter_threshold:
                    rejected += 1
                    continue
                stem = f"aug_{Path(r.image).stem}_to{sid}"
                img_p = f"images/{stem}.{ext}"
                data_mod.save_image(img, out_dir / img_p, image_format)
                emitted.append(data_mod.FrameRecord(
                    seed=r.seed, split=r.split, identity_id=r.identity_id,
                    sequence_id=r.sequence_id, frame_id=r.frame_id, style_id=sid,
                    identity_factors=r.identity_factors,
                    expression_factors=r.expression_factors,
                    pose_factors=r.pose_factors,
                    image=img_p, landmarks=rel(r.landmarks), mask=rel(r.mask),
                    source_frame_ref=rel(r.image), fit_confidence=float(conf), gamma=cfg.gamma,
                ))
    stats = {
        "n_source_frames": len(records),
        "n_styles": len(style_bank),
        "n_attempted": len(records) * len(style_bank),
        "n_emitted": len(emitted),
        "n_rejected": rejected,
    }
    return emitted, stats
