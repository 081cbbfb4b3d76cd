"""Shared fixtures: a disk-backed artifact cache for the trained components.

Heavy artifacts (pretrained oracles, the base denoiser, datasets, augmented
manifests, trained checkpoints) are built through the real pipeline stages
into `.artifact_cache/<config-hash>/` on first use and reused afterwards, so
repeated `pytest` runs only pay the cost once. Delete the cache directory (or
change the config) to force a rebuild.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest
import torch

from faceshift import pipeline
from faceshift.config import RunConfig

CACHE_ROOT = Path(os.environ.get(
    "FACESHIFT_TEST_CACHE", str(Path(__file__).resolve().parent.parent / ".artifact_cache")))


def acceptance_config() -> RunConfig:
    """Reduced-scale profile used by the acceptance suite.

    Small enough to train on a laptop-class CPU, big enough that every
    acceptance criterion is exercised for real. Training hyperparameters that
    the criteria pin (lr 1e-4, batch 4) keep their stated values.
    """
    cfg = RunConfig()
    cfg.data.identities_train = 16
    cfg.data.sequences_train = 2
    cfg.data.frames_train = 4
    cfg.conditioning.fitter_steps = 8000
    cfg.conditioning.recognizer_steps = 5000
    cfg.train.total_steps = 4000
    cfg.train.ckpt_every = 2000
    cfg.metrics.eval_cases = 100
    return cfg


@pytest.fixture(scope="session")
def acc_cfg() -> RunConfig:
    return acceptance_config()


@pytest.fixture(scope="session")
def workdir(acc_cfg) -> Path:
    out = CACHE_ROOT / acc_cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    acc_cfg.save(out / "config.json")
    return out


@pytest.fixture(scope="session")
def oracle_dir(acc_cfg, workdir) -> Path:
    pipeline.stage_oracles(acc_cfg, workdir)
    return workdir


@pytest.fixture(scope="session")
def fitter(acc_cfg, oracle_dir):
    return pipeline.load_fitter(oracle_dir, acc_cfg)


@pytest.fixture(scope="session")
def recognizer(acc_cfg, oracle_dir):
    return pipeline.load_recognizer(oracle_dir, acc_cfg)


@pytest.fixture(scope="session")
def base_dir(acc_cfg, workdir) -> Path:
    pipeline.stage_base(acc_cfg, workdir)
    return workdir


@pytest.fixture(scope="session")
def base_model(acc_cfg, base_dir):
    return pipeline.load_base(base_dir, acc_cfg)


@pytest.fixture(scope="session")
def data_dir(acc_cfg, workdir) -> Path:
    pipeline.stage_data(acc_cfg, workdir)
    return workdir


@pytest.fixture(scope="session")
def augment_stats(acc_cfg, workdir, oracle_dir, base_dir, data_dir) -> dict:
    return pipeline.stage_augment(acc_cfg, workdir)


def _trained(acc_cfg, workdir, ablation: str):
    pipeline.stage_train(acc_cfg, workdir, ablation)
    return pipeline.load_model(workdir, acc_cfg, ablation)


@pytest.fixture(scope="session")
def trained_full(acc_cfg, workdir, oracle_dir, base_dir, data_dir, augment_stats):
    return _trained(acc_cfg, workdir, "full")


@pytest.fixture(scope="session")
def trained_c1(acc_cfg, workdir, oracle_dir, base_dir, data_dir, augment_stats):
    return _trained(acc_cfg, workdir, "C1")


@pytest.fixture(scope="session")
def trained_c2(acc_cfg, workdir, oracle_dir, base_dir, data_dir, augment_stats):
    return _trained(acc_cfg, workdir, "C2")
