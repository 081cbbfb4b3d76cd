"""Shared helpers: deterministic seed derivation and image/tensor conversion."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of hashable parts to a stable 63-bit seed.

    Python's hash() is salted per process, so we go through sha256 to keep
    seeds reproducible across runs and machines.
    """
    key = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


def img_to_tensor(img: np.ndarray) -> torch.Tensor:
    """HxWx3 float [0,1] array -> 3xHxW float32 tensor (still [0,1])."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    """3xHxW tensor -> HxWx3 float32 array clamped to [0,1]."""
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected 3xHxW tensor, got shape {tuple(t.shape)}")
    arr = t.detach().cpu().float().clamp(0.0, 1.0).numpy()
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def batch_to_tensor(imgs) -> torch.Tensor:
    return torch.stack([img_to_tensor(im) for im in imgs], dim=0)


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    """Scalar HSV (all in [0,1]) to an RGB triple."""
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb, dtype=np.float32)
