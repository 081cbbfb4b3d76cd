"""Low-rank adapters for the frozen denoiser's attention projections.

Each adapted weight W (d_out x d_in) gets a pair (A: r x d_in, B: d_out x r)
with B zero-initialized, so a fresh adapter is an exact no-op. The adapted
map is y = W x + (alpha/r) * B (A x); merge() folds the offset into W for
export.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .utils import torch_gen


@dataclass
class LoraPair:
    A: torch.Tensor
    B: torch.Tensor
    alpha: float
    rank: int

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraSet(nn.Module):
    """Named collection of LoRA pairs, one per adapted projection weight."""

    def __init__(self, shapes: dict, rank: int = 4, alpha: float = 4.0, seed: int = 0):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.names = sorted(shapes)
        gen = torch_gen(seed)
        self._a = nn.ParameterDict()
        self._b = nn.ParameterDict()
        for name in self.names:
            d_out, d_in = shapes[name]
            if rank > min(d_out, d_in):
                raise ValueError(f"rank {rank} exceeds min dim of {name} ({d_out}x{d_in})")
            key = name.replace(".", "/")
            a = torch.randn(rank, d_in, generator=gen) / (d_in ** 0.5)
            self._a[key] = nn.Parameter(a)
            self._b[key] = nn.Parameter(torch.zeros(d_out, rank))

    def pair(self, name: str) -> LoraPair:
        key = name.replace(".", "/")
        return LoraPair(A=self._a[key], B=self._b[key], alpha=self.alpha, rank=self.rank)

    def get(self, name: str) -> LoraPair | None:
        return self.pair(name) if name.replace(".", "/") in self._a else None

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def adapted_apply(W: torch.Tensor, lora: LoraPair | None, x: torch.Tensor) -> torch.Tensor:
    """y = x W^T (+ low-rank offset). x: (..., d_in) -> (..., d_out)."""
    y = x @ W.transpose(-1, -2)
    if lora is not None:
        y = y + lora.scale * ((x @ lora.A.transpose(-1, -2)) @ lora.B.transpose(-1, -2))
    return y


def merge(W: torch.Tensor, lora: LoraPair | None) -> torch.Tensor:
    """Fold the adapter into the base weight: W' = W + (alpha/r) B A."""
    if lora is None:
        return W.clone()
    return W + lora.scale * (lora.B @ lora.A)


def attach_points(denoiser) -> list:
    """Names of the adapted weights: Q/K/V/out of every attention block in the
    main denoiser, and nothing else."""
    names = []
    for block_name, block in denoiser.attention_blocks():
        for proj in ("q", "k", "v", "out"):
            names.append(f"{block_name}.{proj}")
    return names


def lora_shapes(denoiser) -> dict:
    shapes = {}
    for block_name, block in denoiser.attention_blocks():
        for proj in ("q", "k", "v", "out"):
            w = block.proj_weight(proj)
            shapes[f"{block_name}.{proj}"] = tuple(w.shape)
    return shapes
