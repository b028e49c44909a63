"""
Training Augmentations
Flip, en-face rotation, translation, scaling, Gaussian noise and gamma jitter on (D, H, W) volumes
"""

from typing import Tuple

import numpy as np
from scipy import ndimage

from .config import AugmentConfig


def _centered_affine(shape: Tuple[int, ...], matrix: np.ndarray) -> np.ndarray:
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return center - matrix @ center


class VolumeAugmenter:
    """Applies each transform independently with its configured probability"""

    def __init__(self, config: AugmentConfig = None):
        self.config = config or AugmentConfig()

    def _warp(self, image: np.ndarray, labels: np.ndarray, matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        offset = _centered_affine(image.shape, matrix)
        image = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode='nearest')
        labels = ndimage.affine_transform(labels, matrix, offset=offset, order=0, mode='nearest')
        return image, labels

    def __call__(self, image: np.ndarray, labels: np.ndarray,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        image = np.asarray(image, dtype=np.float32)
        labels = np.asarray(labels)
        if not cfg.enabled:
            return image.copy(), labels.copy()

        for axis in range(3):
            if rng.random() < cfg.flip_prob:
                image, labels = np.flip(image, axis), np.flip(labels, axis)

        if rng.random() < cfg.rotate_prob and cfg.rotate_degrees > 0:
            angle = np.radians(rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
            cos, sin = np.cos(angle), np.sin(angle)
            # rotation within the en-face (H, W) plane
            matrix = np.array([[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]])
            image, labels = self._warp(image, labels, matrix)

        if rng.random() < cfg.scale_prob:
            factor = rng.uniform(*cfg.scale_range)
            image, labels = self._warp(image, labels, np.eye(3) / factor)

        if rng.random() < cfg.translate_prob and cfg.translate_voxels > 0:
            shift = rng.integers(-cfg.translate_voxels, cfg.translate_voxels + 1, size=3)
            image = ndimage.shift(image, shift, order=0, mode='nearest')
            labels = ndimage.shift(labels, shift, order=0, mode='nearest')

        if rng.random() < cfg.noise_prob and cfg.noise_sigma_max > 0:
            sigma = rng.uniform(0.0, cfg.noise_sigma_max)
            image = image + rng.normal(0.0, sigma, size=image.shape).astype(np.float32)

        if rng.random() < cfg.gamma_prob:
            image = np.clip(image, 0.0, 1.0) ** rng.uniform(*cfg.gamma_range)

        return np.ascontiguousarray(np.clip(image, 0.0, 1.0), dtype=np.float32), np.ascontiguousarray(labels)
