"""Expression/pose coefficient regressor with a validity-confidence head.

Two-stage design: a pose trunk regresses (rotation, translation) and
confidence from the raw image; the image is then differentiably un-posed with
an affine grid resample, and an expression trunk reads the factors off the
aligned face. Aligning first is what makes the fine sub-pixel expression cues
(mouth corner offsets, lid openness, brow arch) learnable at 32x32.

Trained on clean renders across all styles; frozen afterwards. Serves as the
measurement oracle for motion-transfer metrics and as the face-validity
filter for the augmentation pipeline. An auxiliary identity-factor head is
used during training only (denser supervision for the shared features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import faces
from .faces import DEFAULT_SPEC, FaceSpaceSpec
from .utils import batch_to_tensor, derive_seed, img_to_tensor, torch_gen


def _coord_grid(size: int) -> torch.Tensor:
    idx = (torch.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    yy, xx = torch.meshgrid(idx, idx, indexing="ij")
    return torch.stack([xx, yy])[None]


class _Trunk(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        w = width
        self.conv = nn.Sequential(
            nn.Conv2d(5, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(3 * w, 3 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(3 * w * 16, out_dim), nn.SiLU())

    def forward(self, x, grid):
        x = torch.cat([x, grid.expand(x.shape[0], -1, -1, -1)], dim=1)
        return self.head(self.conv(x))


class _RegionTrunk(nn.Module):
    """Reads one face region off the pose-aligned image at 3x upsampling.

    Alignment puts every region at fixed canonical coordinates, so a static
    crop is valid; upsampling gives the convs room to resolve the sub-pixel
    anti-aliasing cues (lid openness, lip thickness, brow arch).
    """

    def __init__(self, rows, cols, width: int = 24, out_dim: int = 128):
        super().__init__()
        self.rows, self.cols = rows, cols
        w = width
        h = 3 * (rows[1] - rows[0])
        wd = 3 * (cols[1] - cols[0])
        self.conv = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        feat = 2 * w * ((h + 3) // 4) * ((wd + 3) // 4)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(feat, out_dim), nn.SiLU())

    def forward(self, aligned):
        crop = aligned[:, :, self.rows[0]:self.rows[1], self.cols[0]:self.cols[1]]
        up = F.interpolate(crop, scale_factor=3, mode="bilinear", align_corners=False)
        return self.head(self.conv(up))


def compose_pose(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Pose of applying alignment p1 then residual p2 (rotation adds, the
    residual translation is expressed in the first-aligned frame)."""
    c, s = torch.cos(p1[:, 0]), torch.sin(p1[:, 0])
    tx = p1[:, 1] + c * p2[:, 1] - s * p2[:, 2]
    ty = p1[:, 2] + s * p2[:, 1] + c * p2[:, 2]
    return torch.stack([p1[:, 0] + p2[:, 0], tx, ty], dim=1)


class FitterNet(nn.Module):
    def __init__(self, d_exp: int = 4, d_pose: int = 3, width: int = 32):
        super().__init__()
        self.pose_trunk = _Trunk(width, 192)
        self.pose_head = nn.Linear(192, d_pose)
        self.conf_head = nn.Linear(192, 1)
        self.resid_trunk = _Trunk(24, 96)
        self.resid_head = nn.Linear(96, d_pose)
        self.exp_trunk = _Trunk(width, 256)
        self.mouth_trunk = _RegionTrunk(rows=(17, 28), cols=(5, 27))
        self.eyes_trunk = _RegionTrunk(rows=(6, 17), cols=(3, 29))
        self.exp_head = nn.Linear(256 + 128 + 128, d_exp)
        self.aux_head = nn.Linear(256 + 128 + 128, 8)
        self.register_buffer("grid", _coord_grid(32))
        # zero-init the residual head: the second pass starts as a no-op
        nn.init.zeros_(self.resid_head.weight)
        nn.init.zeros_(self.resid_head.bias)

    def align(self, x: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        """Resample so the face sits at canonical pose (given estimated pose)."""
        c, s = torch.cos(pose[:, 0]), torch.sin(pose[:, 0])
        theta = torch.stack([
            torch.stack([c, -s, 2.0 * pose[:, 1]], dim=1),
            torch.stack([s, c, 2.0 * pose[:, 2]], dim=1),
        ], dim=1)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        return F.grid_sample(x, grid, align_corners=False, padding_mode="border")

    def _features(self, x):
        h_pose = self.pose_trunk(x, self.grid)
        conf = torch.sigmoid(self.conf_head(h_pose)).squeeze(-1)
        pose1 = self.pose_head(h_pose)
        aligned1 = self.align(x, pose1.detach())
        resid = self.resid_head(self.resid_trunk(aligned1, self.grid))
        pose = compose_pose(pose1.detach(), resid)
        aligned2 = self.align(x, pose.detach())
        h = torch.cat([self.exp_trunk(aligned2, self.grid),
                       self.mouth_trunk(aligned2), self.eyes_trunk(aligned2)], dim=-1)
        return h, pose1, pose, conf

    def forward(self, x):
        h, _, pose, conf = self._features(x)
        return self.exp_head(h), pose, conf

    def forward_with_aux(self, x):
        h, pose1, pose, conf = self._features(x)
        return self.exp_head(h), pose, conf, self.aux_head(h), pose1


@dataclass
class FitterParams:
    net: FitterNet
    spec: FaceSpaceSpec


def _corrupt_batch(imgs: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Non-face negatives for the confidence head: noise and scrambled renders."""
    b = imgs.shape[0]
    kind = torch.randint(0, 3, (b,), generator=rng)
    out = imgs.clone()
    for i in range(b):
        if kind[i] == 0:
            out[i] = torch.rand(imgs.shape[1:], generator=rng)
        elif kind[i] == 1:
            out[i] = torch.randn(imgs.shape[1:], generator=rng) * 0.35 + 0.5
        else:
            flat = out[i].reshape(3, -1)
            perm = torch.randperm(flat.shape[1], generator=rng)
            out[i] = flat[:, perm].reshape(imgs.shape[1:])
    return out.clamp(0, 1)


def _render_pool(n: int, seed: int, spec: FaceSpaceSpec):
    scenes = [faces.sample_scene(derive_seed("fitter-data", seed, i), "train", spec) for i in range(n)]
    imgs = batch_to_tensor([faces.render(s, spec) for s in scenes])
    exp = torch.tensor(np.stack([s.expression_factors for s in scenes]), dtype=torch.float32)
    pose = torch.tensor(np.stack([s.pose_factors for s in scenes]), dtype=torch.float32)
    idf = torch.tensor(np.stack([s.identity_factors for s in scenes]), dtype=torch.float32)
    return imgs, exp, pose, idf


def pretrain_fitter(
    spec: FaceSpaceSpec = DEFAULT_SPEC,
    seed: int = 0,
    steps: int = 8000,
    batch: int = 48,
    lr: float = 7e-4,
    pool_size: int = 8000,
) -> tuple[FitterParams, dict]:
    """Train the regressor on a pool of train-split renders. Deterministic."""
    torch.manual_seed(derive_seed("fitter-init", seed))
    net = FitterNet(spec.d_expression, spec.d_pose)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.05)
    gen = torch_gen(derive_seed("fitter-corrupt", seed))
    pool_imgs, pool_exp, pool_pose, pool_idf = _render_pool(pool_size, seed, spec)
    losses = []
    for step in range(steps):
        idx = torch.randint(0, pool_size, (batch,), generator=gen)
        imgs, exp, pose, idf = pool_imgs[idx], pool_exp[idx], pool_pose[idx], pool_idf[idx]
        # jitter keeps the confidence head permissive to mild off-manifold inputs
        jitter = torch.randn(imgs.shape, generator=gen) * 0.015
        pe, pp, pc, pa, pp1 = net.forward_with_aux((imgs + jitter).clamp(0, 1))
        loss_reg = F.mse_loss(pe, exp) + F.mse_loss(pp, pose) \
            + 0.3 * F.mse_loss(pp1, pose) + 0.3 * F.mse_loss(pa, idf)
        loss_conf = F.binary_cross_entropy(pc, torch.ones_like(pc))
        if step % 2 == 0:  # negatives for the validity head, every other step
            neg = _corrupt_batch(imgs, gen)
            _, _, nc = net(neg)
            loss_conf = loss_conf + F.binary_cross_entropy(nc, torch.zeros_like(nc))
        loss = loss_reg + 0.2 * loss_conf
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss_reg.detach()))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    history = {"initial_loss": float(np.mean(losses[:20])), "final_loss": float(np.mean(losses[-20:]))}
    return FitterParams(net=net, spec=spec), history


def _fit_tensor(x: torch.Tensor, fitter: FitterParams):
    """Mirror-averaged prediction: the face model is bilaterally symmetric, so
    expression factors are invariant under a horizontal flip while rotation
    and x-translation flip sign. Averaging both views halves readout noise."""
    with torch.no_grad():
        e1, p1, c1 = fitter.net(x)
        e2, p2, c2 = fitter.net(torch.flip(x, dims=[3]))
    flip = torch.tensor([-1.0, -1.0, 1.0])
    e = (e1 + e2) / 2
    p = (p1 + p2 * flip) / 2
    c = torch.minimum(c1, c2)
    return e, p, c


def fit_coefficients(img: np.ndarray, fitter: FitterParams):
    """Regress (expression_factors, pose_factors, confidence) from an image."""
    if not np.all(np.isfinite(img)):
        raise ValueError("non-finite image")
    e, p, c = _fit_tensor(img_to_tensor(img)[None], fitter)
    return e[0].numpy().astype(np.float64), p[0].numpy().astype(np.float64), float(c[0])


def fit_batch(imgs, fitter: FitterParams):
    e, p, c = _fit_tensor(batch_to_tensor(imgs), fitter)
    return e.numpy().astype(np.float64), p.numpy().astype(np.float64), c.numpy().astype(np.float64)
