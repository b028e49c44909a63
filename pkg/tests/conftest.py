"""Shared synthetic phantoms and run configs for the test suite"""

from typing import Optional, Tuple

import numpy as np
import pytest

from defn.config import build_run_config
from defn.volume_io import MACULAR_EDEMA, MACULAR_HOLE, RETINA, LabeledVolume

# per-class intensity levels used by the segmentation phantoms
LEVELS = (0.15, 0.55, 0.95, 0.35)


def retina_phantom(shape: Tuple[int, int, int] = (12, 48, 48), spacing=(0.05, 0.02, 0.02), seed: int = 0,
                   band: Tuple[float, float] = (0.35, 0.65), noise: float = 0.02, meta: str = '') -> LabeledVolume:
    """Background above and below a retina band spanning every slice"""
    rng = np.random.default_rng(seed)
    D, H, W = shape
    labels = np.zeros(shape, dtype=np.uint8)
    labels[:, int(H * band[0]):int(H * band[1]), :] = RETINA
    image = np.where(labels == RETINA, 0.7, 0.2)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=shape)
    return LabeledVolume(np.clip(image, 0.0, 1.0), labels, spacing, meta=meta or f"phantom{seed}")


def lesion_phantom(shape: Tuple[int, int, int] = (32, 32, 32), spacing=(0.05, 0.02, 0.02), seed: int = 0,
                   noise: float = 0.01) -> LabeledVolume:
    """Retina band carrying a hole ball and an edema ball, each class at its own intensity"""
    rng = np.random.default_rng(seed)
    D, H, W = shape
    labels = np.zeros(shape, dtype=np.uint8)
    labels[:, H // 4:3 * H // 4, :] = RETINA
    dd, hh, ww = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing='ij')
    r = max(2, min(shape) // 8)
    c1 = (D // 2 + rng.integers(-2, 3), H // 2, W // 3 + rng.integers(-2, 3))
    c2 = (D // 2 + rng.integers(-2, 3), H // 2, 2 * W // 3 + rng.integers(-2, 3))
    labels[(dd - c1[0]) ** 2 + (hh - c1[1]) ** 2 + (ww - c1[2]) ** 2 <= r * r] = MACULAR_HOLE
    labels[(dd - c2[0]) ** 2 + (hh - c2[1]) ** 2 + (ww - c2[2]) ** 2 <= r * r] = MACULAR_EDEMA
    image = np.asarray(LEVELS)[labels] + rng.normal(0.0, noise, size=shape)
    return LabeledVolume(np.clip(image, 0.0, 1.0), labels, spacing, meta=f"lesion{seed}")


def small_run_config(output_dir, epochs: int = 1, max_steps: Optional[int] = None, **sections):
    payload = {
        'seed': 7,
        'output_dir': str(output_dir),
        'data': {'input_size': [32, 32, 32]},
        'augment': {'enabled': False},
        'net': {'base_channels': 8, 'droppath_rate': 0.1},
        'optim': {'pretrain_epochs': epochs, 'finetune_epochs': epochs, 'batch_size': 1,
                  'max_steps': max_steps, 'checkpoint_every': 1},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            payload.setdefault(key, {}).update(value)
        else:
            payload[key] = value
    return build_run_config(payload)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ('DEFN_SEED', 'DEFN_DEVICE', 'DEFN_LOG_LEVEL'):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def phantom():
    return retina_phantom()


@pytest.fixture
def make_phantom():
    return retina_phantom


@pytest.fixture
def make_lesion():
    return lesion_phantom


@pytest.fixture
def run_config(tmp_path):
    def make(epochs: int = 1, max_steps: Optional[int] = None, subdir: str = 'run', **sections):
        return small_run_config(tmp_path / subdir, epochs, max_steps, **sections)
    return make
