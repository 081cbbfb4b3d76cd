"""Evaluation suite: PSNR, a fixed-random perceptual distance, identity cosine
similarity, motion-transfer error, Gaussian Frechet distance, the combined
content/style score, and the self/cross-identity protocol runners.

The perceptual and Frechet feature extractor is a seeded, randomly
initialized, permanently frozen conv net: a documented stand-in for a
pretrained network that keeps the metric structure while removing external
weights. Its seed is recorded in every report so numbers are comparable
across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import batch_to_tensor, derive_seed, img_to_tensor


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """10 log10(1/MSE) for [0,1] images; identical images hit the cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


class FeatureNet(nn.Module):
    """3-layer conv feature extractor, seeded random init, frozen forever."""

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        torch.manual_seed(derive_seed("featnet", seed))
        w1, w2, w3 = widths
        self.conv1 = nn.Conv2d(3, w1, 3, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def layers(self, x: torch.Tensor) -> list:
        h1 = F.silu(self.conv1(x))
        h2 = F.silu(self.conv2(h1))
        h3 = F.silu(self.conv3(h2))
        return [h1, h2, h3]

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate layer, spatially pooled: the Frechet feature."""
        return self.layers(x)[1].mean(dim=(2, 3))


def _unit_channels(h: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return h / (h.norm(dim=1, keepdim=True) + eps)


def perceptual_distance(a: np.ndarray, b: np.ndarray, featnet: FeatureNet) -> float:
    """Mean over layers of spatially averaged squared distances between
    channel-normalized feature maps. Symmetric; zero iff features agree."""
    with torch.no_grad():
        la = featnet.layers(img_to_tensor(a)[None])
        lb = featnet.layers(img_to_tensor(b)[None])
    d = [(float(((_unit_channels(x) - _unit_channels(y)) ** 2).sum(dim=1).mean())) for x, y in zip(la, lb)]
    return float(np.mean(d))


def cs_id(a: np.ndarray, b: np.ndarray, recognizer) -> float:
    """Cosine similarity between the two images' identity embeddings."""
    from .conditioning import encode_identity
    ea, eb = encode_identity(recognizer, a), encode_identity(recognizer, b)
    return float((ea * eb).sum())


@dataclass
class MotionError:
    exp_err: float
    pose_err: float
    confidence: float  # min of the two fits; protocol runners exclude low values


def motion_error(gen: np.ndarray, driver: np.ndarray, fitter) -> MotionError:
    """Euclidean distance between fitted expression and pose coefficients."""
    from .fitter import fit_coefficients
    eg, pg, cg = fit_coefficients(gen, fitter)
    ed, pd, cd = fit_coefficients(driver, fitter)
    return MotionError(
        exp_err=float(np.linalg.norm(eg - ed)),
        pose_err=float(np.linalg.norm(pg - pd)),
        confidence=min(cg, cd),
    )


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping negatives."""
    vals, vecs = np.linalg.eigh((M + M.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_gaussian(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the cross term
    computed as Tr sqrt(sqrt(S1) S2 sqrt(S1)) for symmetry and stability.
    """
    A = np.asarray(feats_a, dtype=np.float64)
    B = np.asarray(feats_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors per set")
    mu1, mu2 = A.mean(axis=0), B.mean(axis=0)
    s1 = np.cov(A, rowvar=False)
    s2 = np.cov(B, rowvar=False)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def frechet_features(imgs, featnet: FeatureNet) -> np.ndarray:
    with torch.no_grad():
        return featnet.pooled(batch_to_tensor(imgs)).numpy().astype(np.float64)


def artfid(lpips_content: float, fid_style: float) -> float:
    """(1 + LPIPS) * (1 + FID): joint content/style fidelity, lower is better."""
    if lpips_content < 0 or fid_style < 0:
        raise ValueError("artfid inputs must be non-negative")
    return (1.0 + lpips_content) * (1.0 + fid_style)


# ---------------------------------------------------------------------------
# Protocol runners
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    protocol: str
    n_samples: int
    n_excluded: int
    cs_id: float
    exp_err: float
    pose_err: float
    psnr: float | None = None
    lpips: float | None = None
    fid: float | None = None
    artfid: float | None = None
    featnet_seed: int | None = None
    config_hash: str | None = None

    COLUMNS = ("psnr", "lpips", "cs_id", "exp_err", "pose_err", "artfid")

    def to_dict(self) -> dict:
        d = {"protocol": self.protocol, "n_samples": self.n_samples, "n_excluded": self.n_excluded}
        for k in self.COLUMNS:
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.fid is not None:
            d["fid"] = self.fid
        if self.featnet_seed is not None:
            d["featnet_seed"] = self.featnet_seed
        if self.config_hash is not None:
            d["config_hash"] = self.config_hash
        return d

    def save(self, json_path: Path) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        with open(json_path.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            cols = [c for c in self.COLUMNS if getattr(self, c) is not None]
            w.writerow(["protocol", *cols, "n_samples", "n_excluded"])
            w.writerow([self.protocol, *[f"{getattr(self, c):.6g}" for c in cols],
                        self.n_samples, self.n_excluded])


@dataclass
class ProtocolCase:
    """One evaluation item: generate an image of `source`'s identity+style
    performing `driver`'s expression/pose. In the self protocol the driver
    shares the source identity and style, so the driver frame itself is the
    reconstruction ground truth."""

    source_img: np.ndarray
    driver_img: np.ndarray
    driver_landmarks: np.ndarray
    source_mask: np.ndarray
    driver_mask: np.ndarray
    ground_truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def run_protocol(
    generate,
    cases: list,
    protocol: str,
    recognizer,
    fitter,
    featnet: FeatureNet,
    confidence_floor: float = 0.5,
    config_hash: str | None = None,
) -> MetricReport:
    """Run `generate(case) -> image` over the cases and aggregate the suite.

    Self protocol: reconstruction metrics (PSNR/LPIPS/FID/combined score)
    against ground-truth targets plus identity and motion metrics. Cross
    protocol: identity and motion metrics only, exactly because no ground
    truth exists there.
    """
    if protocol not in ("self", "cross_id"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if not cases:
        raise ValueError("empty case list")
    outs, psnrs, lpipss, csids, exps, poses = [], [], [], [], [], []
    excluded = 0
    for case in cases:
        out = generate(case)
        outs.append(out)
        csids.append(cs_id(out, case.source_img, recognizer))
        me = motion_error(out, case.driver_img, fitter)
        if me.confidence < confidence_floor:
            excluded += 1
        else:
            exps.append(me.exp_err)
            poses.append(me.pose_err)
        if protocol == "self":
            psnrs.append(psnr(out, case.ground_truth))
            lpipss.append(perceptual_distance(out, case.ground_truth, featnet))
    report = MetricReport(
        protocol=protocol,
        n_samples=len(cases),
        n_excluded=excluded,
        cs_id=float(np.mean(csids)),
        exp_err=float(np.mean(exps)) if exps else float("nan"),
        pose_err=float(np.mean(poses)) if poses else float("nan"),
        featnet_seed=featnet.seed,
        config_hash=config_hash,
    )
    if protocol == "self":
        fid = fid_gaussian(
            frechet_features(outs, featnet),
            frechet_features([c.ground_truth for c in cases], featnet),
        )
        report.psnr = float(np.mean(psnrs))
        report.lpips = float(np.mean(lpipss))
        report.fid = float(fid)
        report.artfid = artfid(report.lpips, report.fid)
    return report
