import numpy as np
import pytest
import torch

from faceshift import lora as L
from faceshift.diffusion import Denoiser


@pytest.fixture(scope="module")
def denoiser():
    torch.manual_seed(0)
    return Denoiser()


def test_zero_init_transparent():
    ls = L.LoraSet({"w": (6, 5)}, rank=2, alpha=2.0, seed=1)
    W = torch.randn(6, 5)
    x = torch.randn(3, 5)
    assert torch.equal(L.adapted_apply(W, ls.pair("w"), x), x @ W.t())


def test_rank_subspace_identity():
    # W=0, A/B identity slices, alpha=r: output is x restricted to the first r coords
    r, d = 2, 3
    pair = L.LoraPair(A=torch.eye(d)[:r], B=torch.eye(d)[:, :r], alpha=float(r), rank=r)
    x = torch.tensor([[1.0, 2.0, 3.0]])
    y = L.adapted_apply(torch.zeros(d, d), pair, x)
    assert torch.allclose(y, torch.tensor([[1.0, 2.0, 0.0]]))


def test_adapted_apply_matches_merge():
    g = torch.Generator().manual_seed(3)
    W = torch.randn(8, 6, generator=g)
    pair = L.LoraPair(A=torch.randn(3, 6, generator=g), B=torch.randn(8, 3, generator=g),
                      alpha=4.0, rank=3)
    x = torch.randn(10, 6, generator=g)
    direct = L.adapted_apply(W, pair, x)
    merged = x @ L.merge(W, pair).t()
    assert torch.allclose(direct, merged, atol=1e-5)


def test_merge_zero_b_returns_w():
    W = torch.randn(4, 4)
    pair = L.LoraPair(A=torch.randn(2, 4), B=torch.zeros(4, 2), alpha=2.0, rank=2)
    assert torch.equal(L.merge(W, pair), W)


def test_merge_rank1_entrywise():
    A = torch.tensor([[1.0, 2.0, 3.0]])       # 1x3
    B = torch.tensor([[1.0], [0.5], [-1.0]])  # 3x1
    pair = L.LoraPair(A=A, B=B, alpha=2.0, rank=1)
    W = torch.zeros(3, 3)
    merged = L.merge(W, pair)
    for i in range(3):
        for j in range(3):
            assert float(merged[i, j]) == pytest.approx(2.0 * float(B[i, 0]) * float(A[0, j]))


def test_attach_points_cover_attention_only(denoiser):
    names = L.attach_points(denoiser)
    blocks = dict(denoiser.attention_blocks())
    assert len(names) == 4 * len(blocks)
    for n in names:
        block, proj = n.rsplit(".", 1)
        assert block in blocks and proj in ("q", "k", "v", "out")
    assert not any("conv" in n or "block" in n for n in names)


def test_trainable_fraction_small(denoiser):
    shapes = L.lora_shapes(denoiser)
    ls = L.LoraSet(shapes, rank=4, alpha=4.0)
    frozen = sum(p.numel() for p in denoiser.parameters())
    assert ls.n_params() / frozen < 0.05


def test_rank_exceeding_dims_rejected():
    with pytest.raises(ValueError):
        L.LoraSet({"w": (3, 3)}, rank=8)


def test_merged_checkpoint_reproduces_adapted_forward(denoiser):
    """Merging every adapter into the base weights gives the same predictions
    as applying adapters on the fly."""
    from faceshift.diffusion import predict_noise
    import copy

    torch.manual_seed(1)
    ls = L.LoraSet(L.lora_shapes(denoiser), rank=4, alpha=4.0, seed=9)
    with torch.no_grad():
        for key in ls._b:
            ls._b[key].normal_(std=0.05)
    x = torch.randn(2, 3, 32, 32)
    adapted, _ = predict_noise(denoiser, ls, x, 123)

    merged = copy.deepcopy(denoiser)
    with torch.no_grad():
        for name, block in merged.attention_blocks():
            for proj in ("q", "k", "v", "out"):
                W = block.proj_weight(proj)
                W.copy_(L.merge(W, ls.pair(f"{name}.{proj}")))
    plain, _ = predict_noise(merged, None, x, 123)
    assert torch.allclose(adapted, plain, atol=1e-5)


def test_frozen_weights_unchanged_by_adapter_training(denoiser):
    before = {k: v.clone() for k, v in denoiser.state_dict().items()}
    ls = L.LoraSet(L.lora_shapes(denoiser), rank=4, alpha=4.0)
    opt = torch.optim.Adam(ls.parameters(), lr=1e-2)
    x = torch.randn(1, 3, 32, 32)
    for _ in range(3):
        from faceshift.diffusion import predict_noise
        eps, _ = predict_noise(denoiser, ls, x, 10)
        loss = (eps ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    after = denoiser.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k]), k
