import numpy as np
import pytest
import torch

from faceshift import conditioning as C
from faceshift import faces
from faceshift.diffusion import Denoiser, predict_noise


@pytest.fixture(scope="module")
def denoiser():
    torch.manual_seed(0)
    m = Denoiser()
    with torch.no_grad():
        torch.nn.init.normal_(m.out_conv.weight, std=0.1)
    for p in m.parameters():
        p.requires_grad_(False)
    return m


class TestProjectors:
    def test_identity_tokens_shape(self):
        p_id = C.make_identity_projector()
        f = torch.randn(64)
        f = f / f.norm()
        seq = C.project_identity(p_id, f)
        assert seq.kind == "identity"
        assert tuple(seq.tokens.shape) == (4, 64)

    def test_identity_tokens_deterministic(self):
        p_id = C.make_identity_projector(seed=3)
        f = torch.randn(64)
        a = C.project_identity(p_id, f).tokens
        b = C.project_identity(p_id, f).tokens
        assert torch.equal(a, b)

    def test_identity_token_bottleneck(self):
        # c_id is a function of f_id alone: equal embeddings -> equal tokens
        p_id = C.make_identity_projector(seed=1)
        f = torch.randn(2, 64)
        f[1] = f[0]
        out = C.project_identity(p_id, f).tokens
        assert torch.equal(out[0], out[1])

    def test_memory_dim_mismatch_rejected(self):
        p_id = C.make_identity_projector()
        with pytest.raises(ValueError):
            C.project_identity(p_id, torch.randn(32))

    def test_style_token_shapes(self):
        e = C.make_style_encoder()
        p = C.make_style_projector()
        img = faces.render(faces.sample_scene(0, "train"))
        patch, glob = C.encode_style(e, img)
        assert tuple(patch.shape) == (1, 64, 64)
        assert tuple(glob.shape) == (1, 64)
        seq = C.project_style(p, patch, glob)
        assert seq.kind == "style"
        assert tuple(seq.tokens.shape) == (4, 64)

    def test_global_token_is_patch_mean(self):
        e = C.make_style_encoder()
        img = faces.render(faces.sample_scene(1, "train"))
        patch, glob = C.encode_style(e, img)
        assert torch.allclose(glob, patch.mean(dim=1), atol=1e-6)

    def test_patch_permutation_invariance_without_positions(self):
        e = C.make_style_encoder(pos_encoding=False)
        p = C.make_style_projector()
        img = faces.render(faces.sample_scene(2, "train"))
        patch, glob = C.encode_style(e, img)
        perm = torch.randperm(patch.shape[1], generator=torch.Generator().manual_seed(0))
        a = C.project_style(p, patch, glob).tokens
        b = C.project_style(p, patch[:, perm], glob).tokens
        assert torch.allclose(a, b, atol=1e-5)

    def test_style_swap_changes_global_token(self):
        e = C.make_style_encoder()
        sc = faces.sample_scene(3, "train")
        with torch.no_grad():
            _, g0 = C.encode_style(e, faces.render(sc.with_style(0)))
            _, g1 = C.encode_style(e, faces.render(sc.with_style(2)))
        assert float((g0 - g1).norm()) > 0.0


class TestComposite:
    def test_union_of_equal_masks(self):
        sc = faces.sample_scene(0, "test")
        m = faces.render_mask(sc)
        lm = faces.render_landmarks(sc)
        comp = C.build_spatial_composite(lm, m, m)
        assert np.array_equal(comp.image[..., 1], m.astype(np.float32))

    def test_disjoint_masks_add(self):
        a = np.zeros((32, 32), dtype=np.uint8)
        b = np.zeros((32, 32), dtype=np.uint8)
        a[:5, :5] = 1
        b[10:15, 10:15] = 1
        lm = np.zeros((32, 32, 3), dtype=np.float32)
        comp = C.build_spatial_composite(lm, a, b)
        assert comp.image[..., 1].sum() == a.sum() + b.sum()

    def test_landmark_channel_independent_of_masks(self):
        sc = faces.sample_scene(1, "test")
        lm = faces.render_landmarks(sc)
        m1 = faces.render_mask(sc)
        m2 = np.zeros_like(m1)
        c1 = C.build_spatial_composite(lm, m1, m1)
        c2 = C.build_spatial_composite(lm, m2, m2)
        assert np.array_equal(c1.image[..., 0], c2.image[..., 0])

    def test_reserved_channel_zero(self):
        sc = faces.sample_scene(2, "test")
        comp = C.build_spatial_composite(faces.render_landmarks(sc), faces.render_mask(sc),
                                         faces.render_mask(sc))
        assert comp.image[..., 2].max() == 0.0

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            C.build_spatial_composite(np.zeros((32, 32, 3)), np.zeros((32, 32)), np.zeros((16, 16)))


class TestControlBranch:
    def test_fresh_branch_residuals_exactly_zero(self, denoiser):
        torch.manual_seed(1)
        branch = C.ControlBranch(denoiser)
        comp = torch.rand(2, 3, 32, 32)
        x_t = torch.randn(2, 3, 32, 32)
        res = branch(comp, torch.randn(2, 4, 64), x_t, 100)
        assert len(res) == 4
        for r in res:
            assert float(r.abs().max()) == 0.0

    def test_model_output_unchanged_at_init(self, denoiser):
        torch.manual_seed(2)
        branch = C.ControlBranch(denoiser)
        x_t = torch.randn(2, 3, 32, 32)
        tokens = torch.randn(2, 4, 64)
        base, _ = predict_noise(denoiser, None, x_t, 300, tokens=tokens)
        res = branch(torch.rand(2, 3, 32, 32), None, x_t, 300)
        cond, _ = predict_noise(denoiser, None, x_t, 300, tokens=tokens, control=res)
        assert torch.equal(cond, base)

    def test_branch_mirrors_encoder_weights(self, denoiser):
        branch = C.ControlBranch(denoiser)
        for (k1, v1), (k2, v2) in zip(denoiser.encoder.state_dict().items(),
                                      branch.encoder.state_dict().items()):
            assert k1 == k2
            assert torch.equal(v1, v2)

    def test_trained_branch_produces_nonzero(self, denoiser):
        torch.manual_seed(3)
        branch = C.ControlBranch(denoiser)
        with torch.no_grad():
            for z in branch.zero_convs:
                z.weight.normal_(std=0.1)
        res = branch(torch.rand(1, 3, 32, 32), torch.randn(1, 4, 64), torch.randn(1, 3, 32, 32), 10)
        assert any(float(r.abs().max()) > 0 for r in res)

    def test_composite_spatial_mismatch_rejected(self, denoiser):
        branch = C.ControlBranch(denoiser)
        with pytest.raises(ValueError):
            branch(torch.rand(1, 3, 16, 16), None, torch.randn(1, 3, 32, 32), 5)


class TestChannelSeparation:
    def test_style_tokens_depend_only_on_source(self):
        e = C.make_style_encoder()
        p = C.make_style_projector()
        src = faces.render(faces.sample_scene(5, "train"))
        a = C.project_style(p, *C.encode_style(e, src)).tokens
        b = C.project_style(p, *C.encode_style(e, src)).tokens
        assert torch.equal(a, b)

    def test_composite_depends_only_on_target_inputs(self):
        sc_t = faces.sample_scene(6, "train")
        lm, m = faces.render_landmarks(sc_t), faces.render_mask(sc_t)
        c1 = C.build_spatial_composite(lm, m, m)
        c2 = C.build_spatial_composite(lm, m, m)
        assert np.array_equal(c1.image, c2.image)
