"""Pixel-space denoising diffusion: schedule, conditional UNet denoiser,
DDIM sampling and DDIM inversion with attention caching.

The denoiser is a small encoder-bottleneck-decoder over 32/16/8 resolutions
with single-head self- and cross-attention at 16x16 and 8x8. Cross-attention
is queried by spatial features and keyed/valued by conditioning token
sequences; with the all-zero null token sequence (and bias-free projections)
cross-attention contributes exactly nothing, so pretraining with null tokens
is genuinely unconditional.

Decoder self-attention layers are the cached/injected set: DDIM inversion can
record their (Q, K, V) per timestep, and sampling can re-run them with blended
queries against another image's cached keys/values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import faces
from .lora import adapted_apply
from .style_transfer import blend_queries, inject_attention
from .utils import batch_to_tensor, derive_seed, tensor_to_img, torch_gen


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[torch.as_tensor(t, dtype=torch.long)]
    while ab.ndim < x0.ndim:
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# Attention cache and forward context
# ---------------------------------------------------------------------------

class AttentionCache:
    """(timestep, layer id, kind) -> detached (Q, K, V) tensors."""

    def __init__(self):
        self._store: dict = {}

    def put(self, t: int, layer_id: str, kind: str, q, k, v) -> None:
        self._store[(int(t), layer_id, kind)] = (q.detach(), k.detach(), v.detach())

    def get(self, t: int, layer_id: str, kind: str = "self"):
        key = (int(t), layer_id, kind)
        if key not in self._store:
            raise KeyError(f"attention cache has no entry for {key}")
        return self._store[key]

    def keys(self):
        return list(self._store.keys())

    def __len__(self):
        return len(self._store)


@dataclass
class InjectionSpec:
    """Style-injection parameters for sampling with cache_mode='inject'."""

    gamma: float
    layer_ids: tuple
    style_cache: AttentionCache


@dataclass
class ForwardCtx:
    lora: object | None = None            # LoraSet or None
    cache_mode: str = "off"               # off | record | inject
    cache: AttentionCache | None = None   # record target / content-query source
    injection: InjectionSpec | None = None
    control: list | None = None           # residuals [r32, r16, r8, r_mid]
    t_key: int | None = None
    cached_layers: tuple = ()


# ---------------------------------------------------------------------------
# Network blocks
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    ang = t.double()[:, None] * freqs[None, :]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head attention with bias-free projection matrices.

    Projections are raw weight parameters so LoRA offsets can be applied
    functionally. `kind` is "self" (keys/values from the feature map) or
    "cross" (keys/values from conditioning tokens).
    """

    def __init__(self, name: str, channels: int, kind: str, d_text: int | None = None):
        super().__init__()
        self.name = name
        self.kind = kind
        self.channels = channels
        kv_dim = channels if kind == "self" else d_text
        def w(d_out, d_in):
            return nn.Parameter(torch.randn(d_out, d_in) / math.sqrt(d_in))
        self.Wq = w(channels, channels)
        self.Wk = w(channels, kv_dim)
        self.Wv = w(channels, kv_dim)
        self.Wout = w(channels, channels)
        self.norm = nn.GroupNorm(8, channels)

    def proj_weight(self, proj: str) -> torch.Tensor:
        return {"q": self.Wq, "k": self.Wk, "v": self.Wv, "out": self.Wout}[proj]

    def _lora(self, ctx: ForwardCtx, proj: str):
        if ctx.lora is None:
            return None
        return ctx.lora.get(f"{self.name}.{proj}")

    def forward(self, h, ctx: ForwardCtx, tokens: torch.Tensor | None = None):
        B, C, H, W = h.shape
        x = self.norm(h).reshape(B, C, H * W).transpose(1, 2)
        if self.kind == "cross":
            if tokens is None:
                raise ValueError(f"{self.name}: cross-attention needs tokens")
            if tokens.shape[-1] != self.Wk.shape[1]:
                raise ValueError(f"{self.name}: token dim {tokens.shape[-1]} != {self.Wk.shape[1]}")
            kv_src = tokens
        else:
            kv_src = x
        q = adapted_apply(self.Wq, self._lora(ctx, "q"), x)
        k = adapted_apply(self.Wk, self._lora(ctx, "k"), kv_src)
        v = adapted_apply(self.Wv, self._lora(ctx, "v"), kv_src)

        if ctx.cache_mode == "record" and self.name in ctx.cached_layers:
            ctx.cache.put(ctx.t_key, self.name, self.kind, q, k, v)

        if (ctx.cache_mode == "inject" and self.kind == "self"
                and ctx.injection is not None and self.name in ctx.injection.layer_ids):
            q_c = ctx.cache.get(ctx.t_key, self.name, "self")[0]
            _, k_s, v_s = ctx.injection.style_cache.get(ctx.t_key, self.name, "self")
            q = blend_queries(q_c, q, ctx.injection.gamma)
            k, v = k_s, v_s

        out = inject_attention(q, k, v)
        out = adapted_apply(self.Wout, self._lora(ctx, "out"), out)
        return h + out.transpose(1, 2).reshape(B, C, H, W)


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    time_dim: int = 128
    d_text: int = 64
    n_null_tokens: int = 4


class DenoiserEncoder(nn.Module):
    """Encoder half (plus bottleneck). The control branch deep-copies this."""

    def __init__(self, cfg: DenoiserConfig, prefix: str = "enc"):
        super().__init__()
        c1, c2, c3 = [cfg.base_channels * m for m in cfg.channel_mults]
        td, dt = cfg.time_dim, cfg.d_text
        self.conv_in = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
        self.block0 = ResBlock(c1, c1, td)
        self.down0 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.block1 = ResBlock(c1, c2, td)
        self.attn1_self = AttentionBlock(f"{prefix}16.self", c2, "self")
        self.attn1_cross = AttentionBlock(f"{prefix}16.cross", c2, "cross", dt)
        self.down1 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.block2 = ResBlock(c2, c3, td)
        self.attn2_self = AttentionBlock(f"{prefix}8.self", c3, "self")
        self.attn2_cross = AttentionBlock(f"{prefix}8.cross", c3, "cross", dt)
        self.mid = ResBlock(c3, c3, td)

    def forward(self, x, temb, tokens, ctx: ForwardCtx, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        s0 = self.block0(h, temb)
        h = self.down0(s0)
        h = self.block1(h, temb)
        h = self.attn1_self(h, ctx)
        h = self.attn1_cross(h, ctx, tokens)
        s1 = h
        h = self.down1(s1)
        h = self.block2(h, temb)
        h = self.attn2_self(h, ctx)
        h = self.attn2_cross(h, ctx, tokens)
        s2 = h
        m = self.mid(s2, temb)
        return s0, s1, s2, m


class Denoiser(nn.Module):
    """Conditional eps-predictor; holds its noise schedule as buffers."""

    cached_layer_ids = ("dec8.self", "dec16.self")

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), schedule: NoiseSchedule | None = None):
        super().__init__()
        self.cfg = cfg
        sched = schedule or make_schedule()
        self.register_buffer("betas", torch.tensor(sched.betas, dtype=torch.float64))
        c1, c2, c3 = [cfg.base_channels * m for m in cfg.channel_mults]
        td, dt = cfg.time_dim, cfg.d_text
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.encoder = DenoiserEncoder(cfg)
        self.dec_block2 = ResBlock(c3 + c3, c3, td)
        self.dec_attn2_self = AttentionBlock("dec8.self", c3, "self")
        self.dec_attn2_cross = AttentionBlock("dec8.cross", c3, "cross", dt)
        self.up1 = nn.Conv2d(c3, c3, 3, padding=1)
        self.dec_block1 = ResBlock(c3 + c2, c2, td)
        self.dec_attn1_self = AttentionBlock("dec16.self", c2, "self")
        self.dec_attn1_cross = AttentionBlock("dec16.cross", c2, "cross", dt)
        self.up0 = nn.Conv2d(c2, c2, 3, padding=1)
        self.dec_block0 = ResBlock(c2 + c1, c1, td)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out_conv = nn.Conv2d(c1, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(betas=self.betas.detach().cpu().numpy())

    def attention_blocks(self):
        enc = self.encoder
        return [
            ("enc16.self", enc.attn1_self), ("enc16.cross", enc.attn1_cross),
            ("enc8.self", enc.attn2_self), ("enc8.cross", enc.attn2_cross),
            ("dec8.self", self.dec_attn2_self), ("dec8.cross", self.dec_attn2_cross),
            ("dec16.self", self.dec_attn1_self), ("dec16.cross", self.dec_attn1_cross),
        ]

    def null_tokens(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.n_null_tokens, self.cfg.d_text, dtype=dtype)

    def time_embedding(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        emb = timestep_embedding(t, self.cfg.time_dim).to(dtype)
        return self.time_mlp(emb)

    def forward(self, x, t, tokens=None, ctx: ForwardCtx | None = None):
        ctx = ctx or ForwardCtx()
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)
        if tokens is None:
            tokens = self.null_tokens(x.shape[0], dtype=x.dtype)
        temb = self.time_embedding(t, dtype=x.dtype)
        s0, s1, s2, m = self.encoder(x, temb, tokens, ctx)
        if ctx.control is not None:
            r0, r1, r2, rm = ctx.control
            s0, s1, s2, m = s0 + r0, s1 + r1, s2 + r2, m + rm
        h = self.dec_block2(torch.cat([m, s2], dim=1), temb)
        h = self.dec_attn2_self(h, ctx)
        h = self.dec_attn2_cross(h, ctx, tokens)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_block1(torch.cat([h, s1], dim=1), temb)
        h = self.dec_attn1_self(h, ctx)
        h = self.dec_attn1_cross(h, ctx, tokens)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_block0(torch.cat([h, s0], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


# ---------------------------------------------------------------------------
# Prediction and DDIM loops
# ---------------------------------------------------------------------------

def predict_noise(
    params: Denoiser,
    lora,
    x_t: torch.Tensor,
    t,
    tokens: torch.Tensor | None = None,
    control: list | None = None,
    cache_mode: str = "off",
    cache: AttentionCache | None = None,
    injection: InjectionSpec | None = None,
):
    """One denoiser evaluation. Returns (eps_hat, cache-or-None).

    cache_mode="record" fills a fresh or provided AttentionCache with the
    decoder self-attention (Q, K, V) at this timestep; "inject" replaces those
    layers' attention inputs per the injection spec.
    """
    if cache_mode not in ("off", "record", "inject"):
        raise ValueError(f"unknown cache_mode {cache_mode!r}")
    if cache_mode == "record" and cache is None:
        cache = AttentionCache()
    if cache_mode == "inject" and (cache is None or injection is None):
        raise ValueError("inject mode needs a content cache and an InjectionSpec")
    t_key = int(t if not torch.is_tensor(t) else t.reshape(-1)[0])
    ctx = ForwardCtx(
        lora=lora, cache_mode=cache_mode, cache=cache, injection=injection,
        control=control, t_key=t_key, cached_layers=params.cached_layer_ids,
    )
    eps = params(x_t, t, tokens, ctx)
    return (eps, cache) if cache_mode == "record" else (eps, None)


def ddim_timesteps(T: int, n_steps: int) -> list:
    if n_steps < 1 or T % n_steps != 0:
        raise ValueError(f"n_steps={n_steps} must divide the schedule length T={T}")
    stride = T // n_steps
    return list(range(stride - 1, T, stride))


def _alpha_bars(params: Denoiser) -> np.ndarray:
    return np.cumprod(1.0 - params.betas.detach().cpu().numpy())


def ddim_step(x: torch.Tensor, eps: torch.Tensor, ab_t: float, ab_prev: float,
              clip_x0: bool = False) -> torch.Tensor:
    """One deterministic DDIM update from noise level ab_t to ab_prev.

    With clip_x0 the predicted clean latent is clamped to the data range
    before the update: essential when sampling from pure noise, where
    1/sqrt(ab_t) amplifies eps error several-hundred-fold at the terminal
    timestep. Inversion-matched trajectories must run unclamped — their
    intermediate x0 predictions legitimately leave the range, and the
    sampler must stay the exact algebraic inverse of the inversion."""
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0)
        if 1.0 - ab_t > 1e-12:
            eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev, 0.0)) * eps


def ddim_sample(
    params: Denoiser,
    lora,
    z_T: torch.Tensor,
    tokens: torch.Tensor | None = None,
    control=None,
    n_steps: int = 50,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    cache_mode: str = "off",
    cache: AttentionCache | None = None,
    injection: InjectionSpec | None = None,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM sampling from z_T down to x0.

    `control` may be a callable (x_t, t) -> residual list, evaluated at every
    step, or None. Set clip_x0 when z_T is unit noise rather than an inverted
    latent.
    """
    ab = _alpha_bars(params)
    ts = ddim_timesteps(len(ab), n_steps)
    x = z_T
    with torch.no_grad():
        for i in reversed(range(len(ts))):
            t = ts[i]
            residuals = control(x, t) if callable(control) else control
            eps, _ = predict_noise(params, lora, x, t, tokens, residuals,
                                   cache_mode=cache_mode if cache_mode == "inject" else "off",
                                   cache=cache, injection=injection)
            ab_t = ab[t]
            ab_prev = ab[ts[i - 1]] if i > 0 else 1.0
            x = ddim_step(x, eps, ab_t, ab_prev, clip_x0=clip_x0)
            if eta > 0.0 and i > 0:
                sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
                x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


def ddim_invert(
    params: Denoiser,
    x0: torch.Tensor,
    tokens: torch.Tensor | None = None,
    n_steps: int = 50,
    record_cache: bool = False,
    lora=None,
    control=None,
    refine_steps: int = 3,
):
    """DDIM inversion from a clean latent up to z_T.

    Each inversion step solves the sampling update implicitly by fixed-point
    iteration (`refine_steps` extra evaluations), so running ddim_sample on
    the result reproduces the input up to solver tolerance wherever a
    preimage under the clamped dynamics exists.

    When record_cache is set, every visited timestep's decoder self-attention
    (Q, K, V) is stored under that timestep's schedule index, aligned with the
    keys ddim_sample visits at the same n_steps; entries are recorded at the
    final (converged) state of each step.
    """
    ab = _alpha_bars(params)
    ts = ddim_timesteps(len(ab), n_steps)
    cache = AttentionCache() if record_cache else None
    x = x0
    with torch.no_grad():
        for i in range(len(ts)):
            t = ts[i]
            ab_prev = ab[ts[i - 1]] if i > 0 else 1.0
            ab_t = ab[t]
            sq_prev = math.sqrt(ab_prev)
            sq_prev_c = math.sqrt(max(1.0 - ab_prev, 0.0))
            y = x
            for k in range(refine_steps + 1):
                record_now = record_cache and k == refine_steps
                residuals = control(y, t) if callable(control) else control
                eps, _ = predict_noise(params, lora, y, t, tokens, residuals,
                                       cache_mode="record" if record_now else "off", cache=cache)
                x0_pred = (x - sq_prev_c * eps) / sq_prev
                y = math.sqrt(ab_t) * x0_pred + math.sqrt(1.0 - ab_t) * eps
            x = y
    return x, cache


# ---------------------------------------------------------------------------
# Latent/image conversion and unconditional pretraining
# ---------------------------------------------------------------------------

def to_latent(img) -> torch.Tensor:
    """HxWx3 [0,1] image (or 3xHxW tensor) -> 3xHxW latent in [-1, 1]."""
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()
    return img * 2.0 - 1.0


def from_latent(z: torch.Tensor) -> np.ndarray:
    return tensor_to_img((z + 1.0) / 2.0)


def pretrain_base(
    cfg: DenoiserConfig = DenoiserConfig(),
    spec=faces.DEFAULT_SPEC,
    seed: int = 0,
    steps: int = 9000,
    batch: int = 16,
    lr: float = 2e-4,
    pool_size: int = 6000,
    x0_jitter: float = 0.01,
    log_every: int = 200,
    progress=None,
) -> tuple[Denoiser, list]:
    """Unconditional pretraining on the multi-style render distribution.

    Trains with the null token sequence throughout, so the resulting weights
    are a purely unconditional base; they are frozen afterwards and later
    conditioning must come through the control branch and LoRA offsets.

    The small x0 jitter smooths the learned density around the (finite) render
    pool; without it the model collapses onto a needle-thin manifold and the
    DDIM inversion map becomes violently ill-conditioned.
    """
    torch.manual_seed(derive_seed("base-init", seed))
    model = Denoiser(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch_gen(derive_seed("base-noise", seed))

    pool = []
    for i in range(pool_size):
        scene = faces.sample_scene(derive_seed("base-pool", seed, i), "train", spec)
        pool.append(faces.render(scene, spec))
    pool = torch.stack([to_latent(im) for im in pool])

    T = model.schedule.T
    losses = []
    for step in range(steps):
        idx = torch.randint(0, pool.shape[0], (batch,), generator=gen)
        x0 = pool[idx]
        if x0_jitter > 0:
            x0 = x0 + x0_jitter * torch.randn(x0.shape, generator=gen)
        t = torch.randint(0, T, (batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, eps, t, model.schedule)
        pred = model(x_t, t)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if progress and step % log_every == 0:
            progress(step, losses[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, losses
