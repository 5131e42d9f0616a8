from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from decompfuse.backbone import BackboneConfig
from decompfuse.degradation import apply_degradation, sample_mask_pair
from decompfuse.model import FusionNetwork, ModelConfig
from decompfuse.synthetic import smooth_scene
from decompfuse.trainer import Corpora, TrainConfig, fit, read_log

# Desk-scale memorization run shared by the acceptance and runtime suites.
OVERFIT_IMAGES = 8
OVERFIT_SIZE = 64
OVERFIT_CONFIG = dict(
    epochs=5,
    steps_per_epoch=100,
    lr0=1e-3,
    lr_decay_epoch=4,
    batch_size=8,
    jitter=0.0,
    flip=False,
    checkpoint_every=0,
    seed=0,
)
PROBE_SEED = 1000  # probe masks use seeds PROBE_SEED + i, never drawn in training

# numbered acceptance outcomes, filled by test_acceptance and listed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def scenes(n: int, size: int, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [smooth_scene(size, size, rng) for _ in range(n)]


def to_batch(*imgs: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.ascontiguousarray(i.transpose(2, 0, 1)) for i in imgs])).to(dtype)


def micro_model_config(dim: int = 16, patch: int = 4, heads: int = 2, base_grid: int = 2) -> ModelConfig:
    """Smallest sensible network: one block everywhere."""
    bb = BackboneConfig(patch_size=patch, dim=dim, depth=1, heads=heads, base_grid=base_grid)
    return ModelConfig(backbone=bb, ca_heads=heads, mfm_depth=1, decoder_depth=1, projector_depth=1)


@pytest.fixture
def tiny_model() -> FusionNetwork:
    torch.manual_seed(0)
    return FusionNetwork(micro_model_config(dim=16, patch=4)).eval()


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Train the micro model on 8 synthetic scenes and hand back everything
    the desk-experiment checks need."""
    images = scenes(OVERFIT_IMAGES, OVERFIT_SIZE, seed=0)
    cfg = TrainConfig(**OVERFIT_CONFIG)
    out = tmp_path_factory.mktemp("overfit")
    start = time.perf_counter()
    bundle = fit(Corpora(images), cfg, out)
    seconds = time.perf_counter() - start
    probes = []
    for i, img in enumerate(images):
        masks = sample_mask_pair(OVERFIT_SIZE, OVERFIT_SIZE, cfg.model.backbone.patch_size, cfg.cover_frac,
                                 seed=PROBE_SEED + i, noise_sigma=cfg.noise_sigma)
        probes.append(apply_degradation(img, masks))
    return {
        "bundle": bundle,
        "images": images,
        "probes": probes,
        "log": read_log(out / "train_log.jsonl"),
        "dir": out,
        "seconds": seconds,
    }
