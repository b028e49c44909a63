"""
Stochastic Defect Injection
Sequence expansion plus simulated macular-hole injection and inverse image synthesis
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .config import SdiConfig
from .errors import ConfigError, DataError
from .volume_io import (BACKGROUND, MACULAR_EDEMA, MACULAR_HOLE, RETINA, LabeledVolume,
                        list_cases, load_volume, save_volume)

logger = logging.getLogger(__name__)

STRATEGIES = ('isolated', 'comprehensive')
MIN_TILE = 4

# 6-connectivity for flood fill, full 26-neighbourhood for majority voting
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
NEIGHBOUR_KERNEL = np.ones((3, 3, 3), dtype=np.int32)
NEIGHBOUR_KERNEL[1, 1, 1] = 0


@dataclass(frozen=True)
class InjectionSpec:
    strategy: str
    distortion_strength: float
    centroid: Tuple[int, int, int]
    radii: Tuple[Tuple[float, float], ...]
    isolation_margin: int = 15
    rng_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"Unknown injection strategy: {self.strategy}")
        if self.isolation_margin < 0:
            raise ConfigError("isolation_margin must be >= 0")
        if any(a < 0 or b < 0 for a, b in self.radii):
            raise DataError("Injection radii must be non-negative")
        if len(self.centroid) != 3 or min(self.centroid) < 0:
            raise DataError(f"Invalid centroid {self.centroid}")

    @property
    def is_empty(self) -> bool:
        return all(a == 0 or b == 0 for a, b in self.radii)


@dataclass(frozen=True, eq=False)
class InjectionResult:
    volume: LabeledVolume
    injected_mask: np.ndarray
    relabeled_edema_mask: np.ndarray
    spec: InjectionSpec


def expand_sequence(v: LabeledVolume, target_slices: int) -> LabeledVolume:
    """Linearly interpolate along the slice axis; labels come from the nearest source slice"""
    d0 = v.shape[0]
    if d0 < 2:
        raise DataError(f"Sequence expansion needs at least 2 slices, got {d0}")
    if target_slices < d0:
        raise DataError(f"Target slice count {target_slices} is below source count {d0}")
    if target_slices == d0:
        return v.replace()

    z = np.linspace(0.0, d0 - 1, target_slices)
    lo = np.floor(z).astype(np.int64)
    hi = np.minimum(lo + 1, d0 - 1)
    frac = (z - lo).astype(np.float32)[:, None, None]
    image = (1.0 - frac) * v.image[lo] + frac * v.image[hi]
    nearest = np.minimum(np.floor(z + 0.5).astype(np.int64), d0 - 1)
    labels = v.labels[nearest]
    sd = v.spacing[0] * (d0 - 1) / (target_slices - 1)
    return v.replace(image=image, labels=labels, spacing=(sd, v.spacing[1], v.spacing[2]))


def _resolve_config(config: Optional[Union[SdiConfig, Dict[str, Any]]]) -> SdiConfig:
    if config is None:
        return SdiConfig()
    if isinstance(config, SdiConfig):
        return config
    return SdiConfig(**config)


def taper_radii(depth: int, centroid_d: int, strength: float, base_radius: float,
                secondary_ratio: float) -> Tuple[Tuple[float, float], ...]:
    """Per-slice (primary, secondary) radii shrinking away from the centroid slice"""
    base = base_radius * strength
    radii = []
    for d in range(depth):
        if base <= 0:
            radii.append((0.0, 0.0))
            continue
        taper = math.sqrt(max(0.0, 1.0 - ((d - centroid_d) / base) ** 2))
        radii.append((base * taper, base * secondary_ratio * taper))
    return tuple(radii)


def build_injection_spec(v: LabeledVolume, centroid: Tuple[int, int, int], strength: float,
                         config: Optional[Union[SdiConfig, Dict[str, Any]]] = None,
                         seed: int = 0) -> InjectionSpec:
    cfg = _resolve_config(config)
    if any(c < 0 or c >= s for c, s in zip(centroid, v.shape)):
        raise DataError(f"Centroid {centroid} lies outside volume {v.shape}")
    radii = taper_radii(v.shape[0], centroid[0], strength, cfg.base_radius, cfg.secondary_ratio)
    return InjectionSpec(strategy=cfg.strategy, distortion_strength=float(strength),
                         centroid=tuple(int(c) for c in centroid), radii=radii,
                         isolation_margin=cfg.margin, rng_seed=int(seed))


def sample_injection_spec(v: LabeledVolume, config: Optional[Union[SdiConfig, Dict[str, Any]]] = None,
                          seed: int = 0) -> InjectionSpec:
    """Draw strength and a retina-anchored centroid from a seeded generator"""
    cfg = _resolve_config(config)
    retina = v.labels == RETINA
    if not retina.any():
        raise DataError(f"{v.meta or 'volume'}: no retina voxels to anchor an injection")

    rng = np.random.default_rng(seed)
    strength = float(rng.uniform(cfg.strength_min, cfg.strength_max))
    com = np.asarray(ndimage.center_of_mass(retina))
    jitter = rng.normal(0.0, cfg.centroid_jitter, size=2) if cfg.centroid_jitter > 0 else np.zeros(2)
    target = np.array([com[0], com[1] + jitter[0], com[2] + jitter[1]])

    # snap onto the nearest retina voxel so the centroid sits inside the band
    coords = np.argwhere(retina)
    nearest = coords[np.argmin(((coords - target) ** 2).sum(axis=1))]
    return build_injection_spec(v, tuple(int(c) for c in nearest), strength, cfg, seed)


def injection_region(spec: InjectionSpec, shape: Tuple[int, int, int]) -> np.ndarray:
    """Per-slice filled ellipses: primary semi-axis along H, secondary along W"""
    if len(spec.radii) != shape[0]:
        raise DataError(f"Spec has {len(spec.radii)} slice radii for a volume of depth {shape[0]}")
    _, ch, cw = spec.centroid
    hh = (np.arange(shape[1]) - ch)[:, None].astype(np.float64)
    ww = (np.arange(shape[2]) - cw)[None, :].astype(np.float64)
    mask = np.zeros(shape, dtype=bool)
    for d, (a, b) in enumerate(spec.radii):
        if a <= 0 or b <= 0:
            continue
        mask[d] = (hh / a) ** 2 + (ww / b) ** 2 <= 1.0
    return mask


def isolation_ring(mask: np.ndarray, margin: int) -> np.ndarray:
    """Voxels within margin (3D Euclidean) of the region, excluding the region"""
    if margin <= 0:
        return np.zeros_like(mask)
    return (ndimage.distance_transform_edt(~mask) <= margin) & ~mask


def connected_edema(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Class-3 voxels 6-connected through class 3 to the region, excluding the region"""
    edema = labels == MACULAR_EDEMA
    if not edema.any():
        return np.zeros_like(mask)
    components, _ = ndimage.label(edema, structure=FACE_STRUCTURE)
    touching = ndimage.binary_dilation(mask, structure=FACE_STRUCTURE) & edema
    seeds = np.unique(components[touching])
    seeds = seeds[seeds > 0]
    return np.isin(components, seeds) & ~mask


def _clear_ring_edema(labels: np.ndarray, ring: np.ndarray) -> None:
    target = ring & (labels == MACULAR_EDEMA)
    if not target.any():
        return
    counts = [ndimage.convolve((labels == k).astype(np.int32), NEIGHBOUR_KERNEL, mode='constant', cval=0)
              for k in (BACKGROUND, RETINA)]
    # ties go to background; no eligible neighbour falls back to retina
    choice = np.where(counts[RETINA] > counts[BACKGROUND], RETINA, BACKGROUND)
    choice = np.where((counts[BACKGROUND] + counts[RETINA]) == 0, RETINA, choice)
    labels[target] = choice[target].astype(labels.dtype)


def _inject(v: LabeledVolume, spec: InjectionSpec, comprehensive: bool) -> InjectionResult:
    mask = injection_region(spec, v.shape)
    if not mask.any():
        raise DataError("Empty injection region: all radii are zero")

    labels = v.labels.copy()
    relabeled = connected_edema(labels, mask) if comprehensive else np.zeros_like(mask)
    labels[mask] = MACULAR_HOLE
    labels[relabeled] = MACULAR_HOLE
    _clear_ring_edema(labels, isolation_ring(mask, spec.isolation_margin))

    mask.setflags(write=False)
    relabeled.setflags(write=False)
    logger.debug(f"Injected {int(mask.sum())} voxels ({spec.strategy}), relabeled {int(relabeled.sum())} edema voxels")
    return InjectionResult(volume=v.replace(labels=labels), injected_mask=mask,
                           relabeled_edema_mask=relabeled, spec=spec)


def inject_isolated(v: LabeledVolume, spec: InjectionSpec) -> InjectionResult:
    if spec.strategy != 'isolated':
        raise ConfigError(f"inject_isolated called with a {spec.strategy} spec")
    return _inject(v, spec, comprehensive=False)


def inject_comprehensive(v: LabeledVolume, spec: InjectionSpec) -> InjectionResult:
    if spec.strategy != 'comprehensive':
        raise ConfigError(f"inject_comprehensive called with a {spec.strategy} spec")
    return _inject(v, spec, comprehensive=True)


def _find_background_window(background: np.ndarray, size: Tuple[int, int],
                            anchor: Tuple[int, int]) -> Optional[Tuple[int, int]]:
    """Top-left of the all-background window of the given size nearest the anchor"""
    ph, pw = size
    H, W = background.shape
    if ph > H or pw > W:
        return None
    integral = np.pad(np.cumsum(np.cumsum(background.astype(np.int64), axis=0), axis=1), ((1, 0), (1, 0)))
    sums = (integral[ph:, pw:] - integral[:-ph, pw:] - integral[ph:, :-pw] + integral[:-ph, :-pw])
    ys, xs = np.nonzero(sums == ph * pw)
    if ys.size == 0:
        return None
    best = np.argmin((ys - anchor[0]) ** 2 + (xs - anchor[1]) ** 2)
    return int(ys[best]), int(xs[best])


def _shrink(s: int) -> int:
    return s if s <= MIN_TILE else max(MIN_TILE, (s + 1) // 2)


def _background_patch(image: np.ndarray, background: np.ndarray, size: Tuple[int, int],
                      anchor: Tuple[int, int]) -> np.ndarray:
    tile = size
    while True:
        origin = _find_background_window(background, tile, anchor)
        if origin is not None:
            y, x = origin
            crop = image[y:y + tile[0], x:x + tile[1]]
            reps = (math.ceil(size[0] / tile[0]), math.ceil(size[1] / tile[1]))
            return np.tile(crop, reps)[:size[0], :size[1]]
        smaller = (_shrink(tile[0]), _shrink(tile[1]))
        if smaller == tile:
            raise DataError(f"No background region large enough to crop a {tile} patch")
        tile = smaller


def synthesize_image(r: InjectionResult, blur_sigma: float = 1.0, alpha: float = 1.0) -> LabeledVolume:
    """Composite blurred background texture over the injected region, slice by slice.

    alpha is the patch opacity inside the mask; the default 1 replaces the masked pixels outright.
    Pixels outside the mask are never touched.
    """
    if blur_sigma < 0:
        raise ConfigError("blur_sigma must be >= 0")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    mask = r.injected_mask
    if not mask.any():
        raise DataError("Cannot synthesize an image for an empty injected mask")

    image = np.array(r.volume.image, dtype=np.float32)
    labels = r.volume.labels
    for d in np.nonzero(mask.any(axis=(1, 2)))[0]:
        rows = np.nonzero(mask[d].any(axis=1))[0]
        cols = np.nonzero(mask[d].any(axis=0))[0]
        h0, h1, w0, w1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        patch = _background_patch(image[d], labels[d] == BACKGROUND, (h1 - h0, w1 - w0), (h0, w0))
        if blur_sigma > 0:
            patch = ndimage.gaussian_filter(patch, blur_sigma, mode='reflect')
        region = mask[d, h0:h1, w0:w1]
        window = image[d, h0:h1, w0:w1]
        window[region] = alpha * patch[region] + (1.0 - alpha) * window[region]
    return r.volume.replace(image=image)


class SdiAugmenter:
    """Runs expansion, injection and synthesis over single volumes or whole datasets"""

    def __init__(self, config: Optional[Union[SdiConfig, Dict[str, Any]]] = None):
        cfg = _resolve_config(config)
        self.sdi_config = cfg
        self.config = {
            'strategy': cfg.strategy,
            'target_slices': cfg.target_slices,
            'blur_sigma': cfg.blur_sigma,
            'alpha': cfg.synthesis_alpha,
            'synthesize': cfg.synthesize,
            'max_workers': 4,
        }

    def augment(self, volume: LabeledVolume, seed: int) -> InjectionResult:
        if volume.shape[0] < self.config['target_slices']:
            volume = expand_sequence(volume, self.config['target_slices'])
        if (volume.labels == MACULAR_HOLE).any():
            logger.warning(f"{volume.meta or 'volume'} already contains a macular hole; injecting anyway")
        spec = sample_injection_spec(volume, self.sdi_config, seed)
        if self.config['strategy'] == 'comprehensive':
            result = inject_comprehensive(volume, spec)
        else:
            result = inject_isolated(volume, spec)
        if self.config['synthesize']:
            synthesized = synthesize_image(result, self.config['blur_sigma'], self.config['alpha'])
            result = InjectionResult(volume=synthesized, injected_mask=result.injected_mask,
                                     relabeled_edema_mask=result.relabeled_edema_mask, spec=spec)
        return result

    def augment_directory(self, in_dir: Union[str, Path], out_dir: Union[str, Path],
                          format: str = 'slice_dir', seed: int = 0) -> Dict[str, Any]:
        """Augment every case under in_dir with independent per-case seeds"""
        cases = list_cases(in_dir, format)
        if not cases:
            raise DataError(f"No cases found under {in_dir}")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(cases))]

        def run(case: Path, case_seed: int) -> Dict[str, Any]:
            volume = load_volume(case, format)
            result = self.augment(volume, case_seed)
            target = out_dir / case.name
            save_volume(result.volume, target, format)
            return {
                'case': case.name,
                'seed': case_seed,
                'injected_voxels': int(result.injected_mask.sum()),
                'relabeled_edema_voxels': int(result.relabeled_edema_mask.sum()),
                'distortion_strength': result.spec.distortion_strength,
            }

        with ThreadPoolExecutor(max_workers=self.config['max_workers']) as pool:
            cases_out: List[Dict[str, Any]] = list(pool.map(run, cases, seeds))

        logger.info(f"Augmented {len(cases_out)} cases into {out_dir}")
        return {'status': 'success', 'strategy': self.config['strategy'], 'cases': cases_out}
