"""
Volume I/O
Load, save and resample OCT volumes with their label masks and physical spacing
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import nibabel as nib
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

logger = logging.getLogger(__name__)

Spacing = Tuple[float, float, float]
PathLike = Union[str, Path]

# Not published for the source scans; callers should pass real spacing when known.
PLACEHOLDER_SPACING: Spacing = (0.03, 0.0039, 0.0115)

FORMATS = ('nifti', 'slice_dir')
SPACING_SIDECAR = 'spacing.json'
LABELS_SUFFIX = '_labels'
IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.tif', '.tiff')


@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    color: Tuple[int, int, int]


@dataclass(frozen=True)
class ClassMap:
    """Ordered class registry; RGB masks are decoded through the colors"""
    entries: Tuple[ClassEntry, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise DataError(f"Class ids must be contiguous from 0, got {ids}")
        colors = [tuple(e.color) for e in self.entries]
        if len(set(colors)) != len(colors):
            raise DataError("Class colors must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id].name

    def decode_rgb(self, rgb: np.ndarray) -> np.ndarray:
        """Map an (..., 3) uint8 color array to class ids"""
        rgb = np.asarray(rgb, dtype=np.uint32)
        keys = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
        lookup = {(r << 16) | (g << 8) | b: e.id for e in self.entries for r, g, b in [e.color]}
        uniq, inverse = np.unique(keys, return_inverse=True)
        unknown = [int(k) for k in uniq if int(k) not in lookup]
        if unknown:
            shown = ', '.join(f"#{k:06x}" for k in unknown[:5])
            raise DataError(f"Unregistered mask color(s): {shown}")
        ids = np.array([lookup[int(k)] for k in uniq], dtype=np.uint8)
        return ids[inverse].reshape(keys.shape)


DEFAULT_CLASS_MAP = ClassMap(entries=(
    ClassEntry(0, 'background', (0, 0, 0)),
    ClassEntry(1, 'retina', (0, 255, 0)),
    ClassEntry(2, 'macular_hole', (255, 0, 0)),
    ClassEntry(3, 'macular_edema', (0, 0, 255)),
))

BACKGROUND, RETINA, MACULAR_HOLE, MACULAR_EDEMA = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class LabeledVolume:
    """Co-registered intensity and label grids, shape (D, H, W), read-only after construction"""
    image: np.ndarray
    labels: np.ndarray
    spacing: Spacing
    meta: str = ''
    class_map: ClassMap = field(default=DEFAULT_CLASS_MAP)

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float32)
        labels = np.array(self.labels)
        if image.ndim != 3:
            raise DataError(f"Image must be 3D, got shape {image.shape}")
        if image.shape != labels.shape:
            raise DataError(f"Image shape {image.shape} and label shape {labels.shape} differ")
        if not np.all(np.isfinite(image)):
            raise DataError("Image holds non-finite intensities")
        if image.size and (image.min() < -1e-6 or image.max() > 1.0 + 1e-6):
            raise DataError(f"Image intensities must lie in [0, 1], got [{image.min()}, {image.max()}]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_map.num_classes):
            raise DataError(f"Label values outside registered classes 0..{self.class_map.num_classes - 1}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"Spacing must hold three positive values, got {self.spacing}")
        image = np.clip(image, 0.0, 1.0)
        labels = labels.astype(np.uint8)
        image.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, 'image', image)
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'spacing', spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.image.shape

    def replace(self, **changes) -> 'LabeledVolume':
        fields = {'image': self.image, 'labels': self.labels, 'spacing': self.spacing,
                  'meta': self.meta, 'class_map': self.class_map}
        fields.update(changes)
        return LabeledVolume(**fields)


def _natural_key(name: str) -> List:
    return [int(text) if text.isdigit() else text.lower() for text in re.split(r"(\d+)", name)]


def normalize_intensity(arr: np.ndarray) -> np.ndarray:
    """Rescale raw intensities to [0, 1]; integer sources use their dtype range"""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    arr = arr.astype(np.float32)
    if arr.size and arr.min() >= 0.0 and arr.max() <= 1.0:
        return arr
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _list_slices(folder: Path) -> List[Path]:
    if not folder.is_dir():
        raise DataError(f"Slice folder not found: {folder}")
    files = [p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    return sorted(files, key=lambda p: _natural_key(p.name))


def _read_mask_slice(path: Path, class_map: ClassMap) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ('RGB', 'RGBA'):
            return class_map.decode_rgb(np.array(img.convert('RGB')))
        ids = np.array(img)
    if ids.ndim != 2:
        raise DataError(f"Mask slice {path.name} has unsupported layout {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= class_map.num_classes):
        raise DataError(f"Mask slice {path.name} holds unregistered class id {int(ids.max())}")
    return ids.astype(np.uint8)


def _read_image_slice(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ('RGB', 'RGBA', 'P'):
            img = img.convert('L')
        return np.array(img)


def _read_spacing_sidecar(folder: Path) -> Optional[Spacing]:
    sidecar = folder / SPACING_SIDECAR
    if not sidecar.exists():
        return None
    try:
        payload = json.loads(sidecar.read_text())
        return (float(payload['mm_d']), float(payload['mm_h']), float(payload['mm_w']))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed spacing sidecar {sidecar}: {e}") from e


def labels_path_for(image_path: PathLike) -> Path:
    """Sibling label file of a NIfTI image: case.nii.gz -> case_labels.nii.gz"""
    path = Path(image_path)
    name = path.name
    for ext in ('.nii.gz', '.nii'):
        if name.endswith(ext):
            return path.with_name(name[:-len(ext)] + LABELS_SUFFIX + ext)
    raise DataError(f"Not a NIfTI path: {path}")


def _load_slice_dir(root: Path, class_map: ClassMap) -> Tuple[np.ndarray, np.ndarray, Optional[Spacing]]:
    image_files = _list_slices(root / 'images')
    mask_files = _list_slices(root / 'masks')
    if not image_files:
        raise DataError(f"No image slices in {root / 'images'}")
    if len(image_files) != len(mask_files):
        raise DataError(f"{root}: {len(image_files)} image slices but {len(mask_files)} mask slices")

    images, masks = [], []
    for img_path, mask_path in zip(image_files, mask_files):
        img = _read_image_slice(img_path)
        mask = _read_mask_slice(mask_path, class_map)
        if img.shape != mask.shape:
            raise DataError(f"Slice {img_path.name}: image {img.shape} and mask {mask.shape} differ")
        if images and img.shape != images[0].shape:
            raise DataError(f"Inconsistent slice shape in {img_path.name}, expected {images[0].shape}")
        images.append(img)
        masks.append(mask)
    return np.stack(images, axis=0), np.stack(masks, axis=0), _read_spacing_sidecar(root)


def _load_nifti(path: Path) -> Tuple[np.ndarray, np.ndarray, Spacing]:
    label_path = labels_path_for(path)
    if not label_path.exists():
        raise DataError(f"Label file not found: {label_path}")
    image = nib.load(str(path))
    labels = nib.load(str(label_path))
    spacing = tuple(float(x) for x in image.header.get_zooms()[:3])
    img_arr = np.asanyarray(image.dataobj)
    lab_arr = np.asanyarray(labels.dataobj)
    if img_arr.ndim != 3 or lab_arr.ndim != 3:
        raise DataError(f"{path.name}: expected 3D image and labels, got {img_arr.shape} and {lab_arr.shape}")
    if img_arr.shape != lab_arr.shape:
        raise DataError(f"{path.name}: image {img_arr.shape} and labels {lab_arr.shape} differ")
    lab_rounded = np.rint(lab_arr)
    if not np.allclose(lab_arr, lab_rounded):
        raise DataError(f"{label_path.name} holds non-integer labels")
    return img_arr, lab_rounded.astype(np.int64), spacing


def load_volume(path: PathLike, format: str = 'slice_dir', spacing: Optional[Spacing] = None,
                class_map: ClassMap = DEFAULT_CLASS_MAP) -> LabeledVolume:
    """Load a labeled volume; explicit spacing wins over the file's own"""
    path = Path(path)
    if format not in FORMATS:
        raise DataError(f"Unknown volume format: {format}")
    if not path.exists():
        raise DataError(f"Volume path not found: {path}")

    if format == 'slice_dir':
        image, labels, file_spacing = _load_slice_dir(path, class_map)
    else:
        image, labels, file_spacing = _load_nifti(path)
        if labels.size and (labels.min() < 0 or labels.max() >= class_map.num_classes):
            raise DataError(f"{path.name}: unregistered class id in labels")

    resolved = spacing or file_spacing
    if resolved is None:
        logger.warning(f"{path}: no spacing recorded, using placeholder {PLACEHOLDER_SPACING} mm")
        resolved = PLACEHOLDER_SPACING

    volume = LabeledVolume(image=normalize_intensity(image), labels=labels, spacing=resolved,
                           meta=str(path), class_map=class_map)
    logger.debug(f"Loaded {path} shape={volume.shape} spacing={volume.spacing}")
    return volume


def save_volume(v: LabeledVolume, path: PathLike, format: str = 'slice_dir') -> None:
    """Write a volume; the image is stored as 8-bit, labels as class ids"""
    path = Path(path)
    if format not in FORMATS:
        raise DataError(f"Unknown volume format: {format}")
    try:
        if format == 'slice_dir':
            _save_slice_dir(v, path)
        else:
            _save_nifti(v, path)
    except OSError as e:
        raise DataError(f"Cannot write volume to {path}: {e}") from e


def _save_slice_dir(v: LabeledVolume, root: Path) -> None:
    (root / 'images').mkdir(parents=True, exist_ok=True)
    (root / 'masks').mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(v.shape[0] - 1)))
    image = _quantize(v.image)
    for i in range(v.shape[0]):
        name = f"{i:0{width}d}.png"
        Image.fromarray(image[i]).save(root / 'images' / name)
        Image.fromarray(np.ascontiguousarray(v.labels[i])).save(root / 'masks' / name)
    sidecar = {'mm_d': v.spacing[0], 'mm_h': v.spacing[1], 'mm_w': v.spacing[2]}
    (root / SPACING_SIDECAR).write_text(json.dumps(sidecar, indent=2))


def _save_nifti(v: LabeledVolume, path: Path) -> None:
    label_path = labels_path_for(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag([v.spacing[0], v.spacing[1], v.spacing[2], 1.0])
    for arr, target in ((_quantize(v.image), path), (v.labels.astype(np.uint8), label_path)):
        img = nib.Nifti1Image(arr, affine)
        img.header.set_zooms(v.spacing)
        nib.save(img, str(target))


def resample_volume(v: LabeledVolume, target: Tuple[int, int, int]) -> LabeledVolume:
    """Trilinear image / nearest-neighbour label resample preserving physical extent"""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise DataError(f"Target dims must be three positive integers, got {target}")
    if target == v.shape:
        return v.replace()

    factors = [t / s for t, s in zip(target, v.shape)]
    image = ndimage.zoom(v.image, factors, order=1, mode='nearest')
    labels = ndimage.zoom(v.labels, factors, order=0, mode='nearest')
    if image.shape != target or labels.shape != target:
        raise DataError(f"Resample produced {image.shape}, expected {target}")
    spacing = tuple(sp * s / t for sp, s, t in zip(v.spacing, v.shape, target))
    return v.replace(image=np.clip(image, 0.0, 1.0), labels=labels, spacing=spacing)


def list_cases(root: PathLike, format: str = 'slice_dir') -> List[Path]:
    """Enumerate case paths under a dataset root in natural order"""
    root = Path(root)
    if not root.exists():
        raise DataError(f"Dataset root not found: {root}")
    if format == 'slice_dir':
        if (root / 'images').is_dir():
            return [root]
        cases = [p for p in root.iterdir() if p.is_dir() and (p / 'images').is_dir()]
    elif format == 'nifti':
        if root.is_file():
            return [root]
        cases = [p for p in root.iterdir()
                 if p.is_file() and p.name.endswith(('.nii', '.nii.gz'))
                 and LABELS_SUFFIX + '.nii' not in p.name]
    else:
        raise DataError(f"Unknown volume format: {format}")
    return sorted(cases, key=lambda p: _natural_key(p.name))


def class_counts(v: LabeledVolume) -> Dict[str, int]:
    counts = np.bincount(v.labels.ravel(), minlength=v.class_map.num_classes)
    return {e.name: int(counts[e.id]) for e in v.class_map.entries}
