import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from faceshift.style_transfer import (
    StyleInjectionConfig,
    adain_latents,
    blend_queries,
    inject_attention,
)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g)


class TestAdain:
    def test_identity_when_content_equals_style(self):
        z = rand(3, 8, 8, seed=1)
        out = adain_latents(z, z)
        assert torch.allclose(out, z, atol=1e-5)

    def test_output_moments_match_style(self):
        z_c, z_s = rand(3, 16, 16, seed=2), rand(3, 16, 16, seed=3) * 2.0 + 1.0
        out = adain_latents(z_c, z_s)
        for c in range(3):
            assert abs(float(out[c].mean() - z_s[c].mean())) < 1e-6
            assert abs(float(out[c].std(unbiased=False) - z_s[c].std(unbiased=False))) < 1e-5

    def test_two_element_channel_case(self):
        # mu_c=1 sd_c=1, mu_s=5 sd_s=2 -> [(0-1)/1*2+5, (2-1)/1*2+5] = [3, 7]
        z_c = torch.tensor([0.0, 2.0]).reshape(1, 1, 2)
        z_s = torch.tensor([3.0, 7.0]).reshape(1, 1, 2)
        out = adain_latents(z_c, z_s)
        assert torch.allclose(out, z_s, atol=1e-4)

    def test_idempotent(self):
        z_c, z_s = rand(3, 8, 8, seed=4), rand(3, 8, 8, seed=5)
        once = adain_latents(z_c, z_s)
        twice = adain_latents(once, z_s)
        assert torch.allclose(once, twice, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adain_latents(rand(3, 8, 8), rand(3, 4, 4))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 4.0), st.floats(-3.0, 3.0))
    def test_moment_matching_property(self, seed, scale, shift):
        z_c = rand(2, 6, 6, seed=seed)
        z_s = rand(2, 6, 6, seed=seed + 1) * scale + shift
        out = adain_latents(z_c, z_s)
        assert torch.allclose(out.mean(dim=(1, 2)), z_s.mean(dim=(1, 2)), atol=1e-5)
        assert torch.allclose(out.std(dim=(1, 2), unbiased=False),
                              z_s.std(dim=(1, 2), unbiased=False), atol=1e-4)


class TestBlendQueries:
    def test_gamma_one_returns_content(self):
        q_c, q_cs = rand(2, 4, 8, seed=1), rand(2, 4, 8, seed=2)
        assert torch.equal(blend_queries(q_c, q_cs, 1.0), q_c)

    def test_gamma_zero_returns_current(self):
        q_c, q_cs = rand(2, 4, 8, seed=3), rand(2, 4, 8, seed=4)
        assert torch.equal(blend_queries(q_c, q_cs, 0.0), q_cs)

    def test_midpoint_scalar(self):
        q_c = torch.full((1, 1, 1), 2.0)
        q_cs = torch.full((1, 1, 1), 4.0)
        assert float(blend_queries(q_c, q_cs, 0.5)) == 3.0

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 10_000))
    def test_linearity_in_gamma(self, gamma, seed):
        q_c, q_cs = rand(1, 3, 4, seed=seed), rand(1, 3, 4, seed=seed + 1)
        out = blend_queries(q_c, q_cs, gamma)
        assert torch.allclose(out, gamma * q_c + (1 - gamma) * q_cs)


class TestInjectAttention:
    def test_single_key_returns_value_row(self):
        q = rand(1, 5, 4, seed=1)
        k = rand(1, 1, 4, seed=2)
        v = rand(1, 1, 4, seed=3)
        out = inject_attention(q, k, v)
        for i in range(5):
            assert torch.allclose(out[0, i], v[0, 0], atol=1e-6)

    def test_uniform_logits_give_row_mean(self):
        # zero queries -> all logits equal -> softmax uniform -> mean of V rows
        q = torch.zeros(1, 3, 4)
        k = rand(1, 6, 4, seed=4)
        v = torch.eye(4).reshape(1, 4, 4).repeat(1, 1, 1)[:, :4, :]
        v = torch.cat([v, v[:, :2]], dim=1)  # 6 rows
        out = inject_attention(q, k, v)
        expected = v.mean(dim=1)
        assert torch.allclose(out[0, 0], expected[0], atol=1e-6)

    def test_matches_bruteforce_2x2(self):
        q = torch.tensor([[[1.0, 2.0], [0.5, -1.0]]])
        k = torch.tensor([[[0.3, 0.7], [-0.2, 0.4]]])
        v = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        out = inject_attention(q, k, v)
        d = 2
        expected = torch.zeros(2, 2)
        for i in range(2):
            logits = [sum(q[0, i, m] * k[0, j, m] for m in range(d)) / d ** 0.5 for j in range(2)]
            mx = max(float(l) for l in logits)
            ws = [float(torch.exp(l - mx)) for l in logits]
            z = sum(ws)
            for j in range(2):
                for m in range(d):
                    expected[i, m] += ws[j] / z * v[0, j, m]
        assert torch.allclose(out[0], expected, atol=1e-6)

    def test_broadcasts_single_style_batch(self):
        q = rand(3, 5, 4, seed=6)
        k, v = rand(1, 7, 4, seed=7), rand(1, 7, 4, seed=8)
        out = inject_attention(q, k, v)
        one = inject_attention(q[1:2], k, v)
        assert torch.allclose(out[1], one[0], atol=1e-6)

    def test_mismatched_rows_rejected(self):
        with pytest.raises(ValueError):
            inject_attention(rand(1, 2, 4), rand(1, 3, 4), rand(1, 2, 4))


class TestConfig:
    def test_gamma_range_enforced(self):
        with pytest.raises(ValueError):
            StyleInjectionConfig(gamma=1.5)

    def test_defaults(self):
        cfg = StyleInjectionConfig()
        assert cfg.gamma == 0.8
        assert cfg.n_steps == 50
        assert cfg.filter_threshold == 0.5
