"""Stylization pipeline behaviors that need the pretrained base model."""

import numpy as np
import pytest
import torch

from faceshift import data as data_mod
from faceshift import diffusion as D
from faceshift import faces
from faceshift.metrics import FeatureNet, perceptual_distance, psnr
from faceshift.style_transfer import StyleInjectionConfig, augment_dataset, stylize
from faceshift.utils import derive_seed


@pytest.fixture(scope="module")
def quick_cfg():
    # 10-step inversion keeps these functional tests snappy; the acceptance
    # suite exercises the full 50-step configuration
    return StyleInjectionConfig(gamma=0.8, n_steps=10)


class TestRoundTrip:
    def test_invert_sample_invert_fixed_point(self, base_model):
        img = faces.render(faces.sample_scene(derive_seed("rt", 0), "test"))
        x0 = D.to_latent(img)[None]
        z1, _ = D.ddim_invert(base_model, x0, n_steps=25)
        back = D.ddim_sample(base_model, None, z1, n_steps=25)
        z2, _ = D.ddim_invert(base_model, back, n_steps=25)
        rms = float(((z1 - z2) ** 2).mean().sqrt())
        assert rms < 1e-2

    def test_reconstruction_psnr(self, base_model):
        vals = []
        for k in range(5):
            img = faces.render(faces.sample_scene(derive_seed("rt", k), "test"))
            x0 = D.to_latent(img)[None]
            z, _ = D.ddim_invert(base_model, x0, n_steps=50)
            rec = D.from_latent(D.ddim_sample(base_model, None, z, n_steps=50)[0])
            vals.append(psnr(img, rec))
        assert float(np.mean(vals)) >= 30.0


class TestStylize:
    def test_deterministic(self, base_model, quick_cfg):
        content = faces.render(faces.sample_scene(derive_seed("st", 1), "test"))
        style = faces.render(faces.canonical_scene(3))
        a = stylize(content, style, quick_cfg, base_model)
        b = stylize(content, style, quick_cfg, base_model)
        assert np.array_equal(a, b)

    def test_self_style_near_identity(self, base_model):
        cfg = StyleInjectionConfig(gamma=0.8, n_steps=50)
        content = faces.render(faces.sample_scene(derive_seed("st", 2), "test"))
        out = stylize(content, content, cfg, base_model)
        # compare against the plain round trip under the same sampler mode
        z, _ = D.ddim_invert(base_model, D.to_latent(content)[None], n_steps=50)
        rec = D.from_latent(D.ddim_sample(base_model, None, z, n_steps=50, clip_x0=True)[0])
        assert psnr(rec, out) >= 28.0

    def test_gamma_extremes_order_content_distance(self, base_model, quick_cfg):
        featnet = FeatureNet(seed=77)
        content = faces.render(faces.sample_scene(derive_seed("st", 3), "test").with_style(0))
        style = faces.render(faces.canonical_scene(4))
        d = {}
        for gamma in (0.0, 1.0):
            cfg = StyleInjectionConfig(gamma=gamma, n_steps=quick_cfg.n_steps)
            out = stylize(content, style, cfg, base_model)
            d[gamma] = perceptual_distance(out, content, featnet)
        assert d[1.0] < d[0.0]

    def test_unknown_layer_rejected(self, base_model):
        cfg = StyleInjectionConfig(gamma=0.5, injected_layer_ids=("nope.self",), n_steps=10)
        img = faces.render(faces.canonical_scene(0))
        with pytest.raises(ValueError):
            stylize(img, img, cfg, base_model)


class TestAugment:
    @pytest.fixture(scope="class")
    def tiny_manifest(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("aug-src")
        records = data_mod.generate_split(out, "train", 2, 1, 2, [0], seed=77)
        return out, records

    def test_counts_and_metadata(self, base_model, fitter, tiny_manifest, tmp_path):
        src_dir, records = tiny_manifest
        bank = faces.style_bank([1, 3])
        cfg = StyleInjectionConfig(gamma=0.8, n_steps=10, filter_threshold=0.5)
        aug, stats = augment_dataset(records, src_dir, bank, cfg, fitter, base_model,
                                     tmp_path / "aug", batch_size=4)
        assert stats["n_attempted"] == len(records) * 2
        assert stats["n_emitted"] + stats["n_rejected"] == stats["n_attempted"]
        assert len(aug) == stats["n_emitted"]
        for r in aug:
            src = next(s for s in records if s.image in r.source_frame_ref)
            assert r.expression_factors == src.expression_factors
            assert r.pose_factors == src.pose_factors
            assert r.gamma == 0.8
            assert r.fit_confidence >= 0.5
            assert (tmp_path / "aug" / r.image).exists()
            assert (tmp_path / "aug" / r.landmarks).exists()

    def test_zero_threshold_emits_everything(self, base_model, fitter, tiny_manifest, tmp_path):
        src_dir, records = tiny_manifest
        bank = faces.style_bank([2])
        cfg = StyleInjectionConfig(gamma=0.8, n_steps=10, filter_threshold=0.0)
        aug, stats = augment_dataset(records, src_dir, bank, cfg, fitter, base_model,
                                     tmp_path / "aug0", batch_size=4)
        assert len(aug) == len(records) * 1
        assert stats["n_rejected"] == 0

    def test_empty_style_bank_rejected(self, base_model, fitter, tiny_manifest, tmp_path):
        src_dir, records = tiny_manifest
        with pytest.raises(ValueError):
            augment_dataset(records, src_dir, {}, StyleInjectionConfig(), fitter,
                            base_model, tmp_path / "aug-e")
