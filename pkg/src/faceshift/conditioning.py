"""Dual-encoder conditioning: frozen identity recognizer with a token
projector, a patch-based style encoder with a learnable-query projector, the
landmark/mask spatial composite, and the zero-convolution control branch.

Identity tokens go straight to the main denoiser's cross-attention; style
tokens enter only through the control branch, which fuses them with the
spatial composite and emits per-resolution residuals through zero-initialized
convolutions (so an untrained branch is exactly transparent).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import faces
from .diffusion import Denoiser, ForwardCtx
from .utils import batch_to_tensor, derive_seed, img_to_tensor, torch_gen


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (n, d) or (B, n, d)
    kind: str             # identity | style | null

    def batched(self) -> torch.Tensor:
        return self.tokens if self.tokens.ndim == 3 else self.tokens[None]


def null_tokens(n: int = 4, d: int = 64) -> TokenSequence:
    return TokenSequence(tokens=torch.zeros(n, d), kind="null")


# ---------------------------------------------------------------------------
# Identity recognizer (frozen oracle after pretraining)
# ---------------------------------------------------------------------------

class RecognizerNet(nn.Module):
    def __init__(self, d_id: int = 64, width: int = 32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(3 * w, 3 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.embed = nn.Sequential(nn.Flatten(), nn.Linear(3 * w * 16, 192), nn.SiLU(), nn.Linear(192, d_id))

    def forward(self, x):
        f = self.embed(self.features(x))
        return F.normalize(f, dim=-1)


def pretrain_recognizer(
    n_identities: int = 96,
    spec=faces.DEFAULT_SPEC,
    seed: int = 0,
    steps: int = 5000,
    batch: int = 48,
    lr: float = 1e-3,
    d_id: int = 64,
    margin: float = 0.25,
    scale: float = 24.0,
    variants: int = 12,
) -> tuple[RecognizerNet, dict]:
    """Margin-based identity classification over train-split identities.

    Every batch mixes all styles and random expression/pose, which is what
    pushes the embedding toward style-invariant identity features. The
    returned net is frozen.
    """
    if n_identities < 64:
        raise ValueError("need at least 64 identities for a usable embedding")
    torch.manual_seed(derive_seed("recognizer-init", seed))
    net = RecognizerNet(d_id=d_id)
    head = nn.Parameter(torch.randn(n_identities, d_id) / math.sqrt(d_id))
    opt = torch.optim.Adam(list(net.parameters()) + [head], lr=lr)
    id_factors = [faces.sample_identity(i, "train", spec) for i in range(n_identities)]

    # pool: every identity in every style, several expression/pose variants each
    pool_imgs, pool_labels = [], []
    rng = np.random.default_rng(derive_seed("recognizer-pool", seed))
    for lab in range(n_identities):
        for style in range(spec.n_styles):
            for k in range(variants):
                scene = faces.FaceScene(
                    identity_factors=id_factors[lab],
                    expression_factors=faces.sample_expression(rng, spec),
                    pose_factors=faces.sample_pose(rng, spec),
                    style_id=style,
                    seed=derive_seed("recognizer-frame", seed, lab, style, k),
                )
                pool_imgs.append(faces.render(scene, spec))
                pool_labels.append(lab)
    pool = batch_to_tensor(pool_imgs)
    pool_labels = np.asarray(pool_labels)
    gen = torch_gen(derive_seed("recognizer-batches", seed))

    losses = []
    for step in range(steps):
        idx = torch.randint(0, pool.shape[0], (batch,), generator=gen)
        labels = pool_labels[idx.numpy()]
        jitter = torch.randn(pool[idx].shape, generator=gen) * 0.015
        emb = net((pool[idx] + jitter).clamp(0, 1))
        cos = emb @ F.normalize(head, dim=-1).t()
        target = torch.tensor(labels, dtype=torch.long)
        logits = scale * (cos - margin * F.one_hot(target, n_identities))
        loss = F.cross_entropy(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, {"initial_loss": float(np.mean(losses[:20])), "final_loss": float(np.mean(losses[-20:]))}


def encode_identity(rec: RecognizerNet, img: np.ndarray) -> torch.Tensor:
    """Unit-norm identity embedding of one image."""
    if not np.all(np.isfinite(img)):
        raise ValueError("non-finite image")
    with torch.no_grad():
        return rec(img_to_tensor(img)[None])[0]


def encode_identity_batch(rec: RecognizerNet, imgs) -> torch.Tensor:
    with torch.no_grad():
        return rec(batch_to_tensor(imgs))


# ---------------------------------------------------------------------------
# Token projectors
# ---------------------------------------------------------------------------

class DecoderLayer(nn.Module):
    """Pre-LN transformer decoder layer, single head."""

    def __init__(self, d: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_qkv = nn.Linear(d, 3 * d, bias=False)
        self.self_out = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.cross_q = nn.Linear(d, d, bias=False)
        self.cross_kv = nn.Linear(d, 2 * d, bias=False)
        self.cross_out = nn.Linear(d, d, bias=False)
        self.ln3 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))

    @staticmethod
    def _attn(q, k, v):
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return w @ v

    def forward(self, x, memory):
        h = self.ln1(x)
        q, k, v = self.self_qkv(h).chunk(3, dim=-1)
        x = x + self.self_out(self._attn(q, k, v))
        h = self.ln2(x)
        k, v = self.cross_kv(memory).chunk(2, dim=-1)
        x = x + self.cross_out(self._attn(self.cross_q(h), k, v))
        return x + self.mlp(self.ln3(x))


class TokenProjector(nn.Module):
    """Learnable queries cross-attending over an input token sequence."""

    def __init__(self, n_queries: int, d: int, d_in: int, n_layers: int = 3):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, d) / math.sqrt(d))
        self.in_proj = nn.Linear(d_in, d)
        self.layers = nn.ModuleList([DecoderLayer(d) for _ in range(n_layers)])

    def forward(self, memory: torch.Tensor) -> torch.Tensor:
        if memory.ndim == 2:
            memory = memory[None]
        if memory.shape[-1] != self.in_proj.in_features:
            raise ValueError(f"memory dim {memory.shape[-1]} != {self.in_proj.in_features}")
        mem = self.in_proj(memory)
        x = self.queries[None].expand(memory.shape[0], -1, -1)
        for layer in self.layers:
            x = layer(x, mem)
        return x


def make_identity_projector(d_id: int = 64, d_text: int = 64, n_tokens: int = 4, seed: int = 0) -> TokenProjector:
    torch.manual_seed(derive_seed("p-id-init", seed))
    return TokenProjector(n_tokens, d_text, d_id)


def project_identity(p_id: TokenProjector, f_id: torch.Tensor) -> TokenSequence:
    """Map one identity embedding (or a batch) to the identity token sequence."""
    mem = f_id.reshape(-1, 1, f_id.shape[-1])  # single memory token per sample
    out = p_id(mem)
    return TokenSequence(tokens=out if f_id.ndim > 1 else out[0], kind="identity")


class StylePatchEncoder(nn.Module):
    """Shallow conv patch embedder: 4x4 patches -> tokens, plus a mean-pooled
    global token. Positional encodings are optional and off by default (style
    is a global property; without them the token set is order-free)."""

    def __init__(self, d_text: int = 64, patch: int = 4, image_size: int = 32, pos_encoding: bool = False):
        super().__init__()
        self.proj = nn.Conv2d(3, d_text, kernel_size=patch, stride=patch)
        self.pos_encoding = pos_encoding
        n = (image_size // patch) ** 2
        if pos_encoding:
            self.pos = nn.Parameter(torch.randn(n, d_text) * 0.02)

    def forward(self, img: torch.Tensor):
        if img.ndim == 3:
            img = img[None]
        tok = self.proj(img).flatten(2).transpose(1, 2)  # (B, n_patches, d)
        if self.pos_encoding:
            tok = tok + self.pos[None]
        return tok, tok.mean(dim=1)


def make_style_encoder(d_text: int = 64, seed: int = 0, pos_encoding: bool = False) -> StylePatchEncoder:
    torch.manual_seed(derive_seed("e-sty-init", seed))
    return StylePatchEncoder(d_text=d_text, pos_encoding=pos_encoding)


def encode_style(e_sty: StylePatchEncoder, img) -> tuple[torch.Tensor, torch.Tensor]:
    """(patch_tokens, global_token) for one image or a batch tensor."""
    if isinstance(img, np.ndarray):
        img = img_to_tensor(img)
    return e_sty(img)


def make_style_projector(d_text: int = 64, n_tokens: int = 4, seed: int = 0) -> TokenProjector:
    torch.manual_seed(derive_seed("p-sty-init", seed))
    return TokenProjector(n_tokens, d_text, d_text)


def project_style(p_sty: TokenProjector, patch_tokens: torch.Tensor, global_token: torch.Tensor) -> TokenSequence:
    if patch_tokens.ndim == 2:
        patch_tokens, global_token = patch_tokens[None], global_token[None]
    memory = torch.cat([patch_tokens, global_token[:, None, :]], dim=1)
    out = p_sty(memory)
    return TokenSequence(tokens=out if out.shape[0] > 1 else out[0], kind="style")


# ---------------------------------------------------------------------------
# Spatial composite
# ---------------------------------------------------------------------------

@dataclass
class SpatialComposite:
    image: np.ndarray  # HxWx3: [landmark gray, blended mask, zeros]

    def tensor(self) -> torch.Tensor:
        return img_to_tensor(self.image)


def build_spatial_composite(landmarks_target: np.ndarray, mask_src: np.ndarray, mask_tgt: np.ndarray) -> SpatialComposite:
    """Channel 0: grayscale target landmarks; channel 1: union of the source
    and target foreground masks; channel 2: reserved zero."""
    if mask_src.shape != mask_tgt.shape or landmarks_target.shape[:2] != mask_src.shape:
        raise ValueError("landmarks/mask spatial dims differ")
    lm = landmarks_target.mean(axis=2) if landmarks_target.ndim == 3 else landmarks_target
    blended = np.maximum(mask_src.astype(np.float32), mask_tgt.astype(np.float32))
    comp = np.stack([lm.astype(np.float32), blended, np.zeros_like(blended)], axis=2)
    return SpatialComposite(image=np.clip(comp, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Control branch
# ---------------------------------------------------------------------------

class ControlBranch(nn.Module):
    """Trainable copy of the denoiser encoder, fed x_t plus an encoded
    composite; style tokens enter through the branch's cross-attention.
    Residuals leave through zero convolutions, so a fresh branch emits exactly
    zero for any input."""

    def __init__(self, denoiser: Denoiser):
        super().__init__()
        cfg = denoiser.cfg
        self.cfg = cfg
        self.encoder = copy.deepcopy(denoiser.encoder)
        self.time_mlp = copy.deepcopy(denoiser.time_mlp)
        c1, c2, c3 = [cfg.base_channels * m for m in cfg.channel_mults]
        self.hint = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.SiLU(), nn.Conv2d(c1, c1, 3, padding=1))
        self.zero_convs = nn.ModuleList([
            nn.Conv2d(c, c, 1) for c in (c1, c2, c3, c3)
        ])
        for z in self.zero_convs:
            nn.init.zeros_(z.weight)
            nn.init.zeros_(z.bias)

    def forward(self, composite: torch.Tensor, tokens: torch.Tensor | None, x_t: torch.Tensor, t) -> list:
        if composite.ndim == 3:
            composite = composite[None]
        if composite.shape[0] != x_t.shape[0]:
            composite = composite.expand(x_t.shape[0], -1, -1, -1)
        if composite.shape[-2:] != x_t.shape[-2:]:
            raise ValueError("composite spatial dims do not match x_t")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        from .diffusion import timestep_embedding
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x_t.dtype))
        if tokens is None:
            tokens = torch.zeros(x_t.shape[0], self.cfg.n_null_tokens, self.cfg.d_text, dtype=x_t.dtype)
        s0, s1, s2, m = self.encoder(x_t, temb, tokens, ForwardCtx(), hint=self.hint(composite))
        return [z(h) for z, h in zip(self.zero_convs, (s0, s1, s2, m))]


def control_forward(ctrl: ControlBranch, composite: SpatialComposite, c_sty: TokenSequence | None,
                    x_t: torch.Tensor, t) -> list:
    tokens = c_sty.batched() if c_sty is not None else None
    return ctrl(composite.tensor().to(x_t.dtype), tokens, x_t, t)
