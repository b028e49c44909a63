"""
3D Reconstruction & ETDRS Quantification
Per-class surface meshes and sector volumes on the 1/3/6 mm macular grid
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter, gaussian_filter1d
from skimage.measure import marching_cubes

from .errors import DataError
from .volume_io import MACULAR_EDEMA, MACULAR_HOLE, RETINA

logger = logging.getLogger(__name__)

Spacing = Tuple[float, float, float]

QUANTIFIED_CLASSES = {'MH': MACULAR_HOLE, 'ME': MACULAR_EDEMA, 'RA': RETINA}
SECTORS = ('F', 'IS', 'II', 'IT', 'IN', 'OS', 'OI', 'OT', 'ON')
INNER_CIRCLE = ('F', 'IS', 'II', 'IT', 'IN')
REGIONS = SECTORS + ('IC', 'OC')
ETDRS_DIAMETERS_MM = (1.0, 3.0, 6.0)
LATERALITIES = ('OD', 'OS')
GAUSSIAN_TRUNCATE = 4.0


def _in_bounds_mass(shape: Tuple[int, ...], sigma: float, box: Tuple[slice, ...]) -> np.ndarray:
    """Gaussian mass inside the volume at each voxel of box; separable per axis"""
    mass = np.ones((1,) * len(shape))
    for axis, (n, s) in enumerate(zip(shape, box)):
        line = gaussian_filter1d(np.ones(n), sigma, mode='constant', cval=0.0, truncate=GAUSSIAN_TRUNCATE)[s]
        mass = mass * line.reshape([-1 if a == axis else 1 for a in range(len(shape))])
    return mass


def smooth_class_crop(labels: np.ndarray, c: int,
                      sigma: float = 1.0) -> Tuple[Optional[np.ndarray], Tuple[int, int, int]]:
    """Smoothed class indicator on the class bounding box grown by the kernel radius plus one.

    Voxels outside the crop are zero in the full field. Returns (None, origin) when the class is absent.
    """
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    labels = np.asarray(labels)
    coords = np.argwhere(labels == c)
    if not len(coords):
        return None, (0, 0, 0)
    margin = int(GAUSSIAN_TRUNCATE * sigma + 0.5) + 1
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + margin + 1, labels.shape)
    box = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    indicator = (labels[box] == c).astype(np.float64)
    origin = tuple(int(a) for a in lo)
    if sigma == 0:
        return indicator, origin
    smoothed = gaussian_filter(indicator, sigma, mode='constant', cval=0.0, truncate=GAUSSIAN_TRUNCATE)
    return np.clip(smoothed / _in_bounds_mass(labels.shape, sigma, box), 0.0, 1.0), origin


def smooth_class_field(labels: np.ndarray, c: int, sigma: float = 1.0) -> np.ndarray:
    """Gaussian-smoothed class indicator, normalized by the in-bounds kernel mass"""
    labels = np.asarray(labels)
    crop, origin = smooth_class_crop(labels, c, sigma)
    full = np.zeros(labels.shape, dtype=np.float64)
    if crop is not None:
        full[tuple(slice(o, o + n) for o, n in zip(origin, crop.shape))] = crop
    return full


@dataclass
class ClassMesh:
    """Triangle mesh with vertices in mm, ordered (d, h, w)"""
    class_id: int
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    empty: bool = False

    def __post_init__(self):
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("Mesh faces reference missing vertices")

    def volume(self) -> float:
        """Enclosed volume from the divergence theorem"""
        if self.faces.size == 0:
            return 0.0
        v0, v1, v2 = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(abs(np.einsum('ij,ij->i', v0, np.cross(v1, v2)).sum()) / 6.0)

    def xyz(self) -> Tuple[np.ndarray, np.ndarray]:
        """Vertices as (x=w, y=h, z=d) with winding flipped to keep orientation"""
        return self.vertices[:, ::-1], self.faces[:, ::-1]


def extract_mesh(field_: np.ndarray, iso: float = 0.5, spacing: Spacing = (1.0, 1.0, 1.0),
                 class_id: int = 0, origin: Tuple[int, int, int] = (0, 0, 0)) -> ClassMesh:
    """Iso-surface in mm; origin is the voxel offset of field_ inside the full volume"""
    if not 0.0 < iso < 1.0:
        raise DataError(f"iso level must lie in (0, 1), got {iso}")
    field_ = np.asarray(field_, dtype=np.float64)
    if field_.size == 0 or field_.max() <= iso:
        return ClassMesh(class_id=class_id, empty=True)
    # zero padding closes surfaces that touch the volume border
    padded = np.pad(field_, 1, mode='constant', constant_values=0.0)
    verts, faces, _, _ = marching_cubes(padded, level=iso, spacing=tuple(float(s) for s in spacing))
    verts = verts + (np.asarray(origin, dtype=np.float64) - 1.0) * np.asarray(spacing, dtype=np.float64)
    return ClassMesh(class_id=class_id, vertices=verts, faces=faces.astype(np.int64))


def write_ply(mesh: ClassMesh, path: Union[str, Path]) -> None:
    verts, faces = mesh.xyz()
    lines = [
        'ply', 'format ascii 1.0', f'comment class {mesh.class_id}, units mm',
        f'element vertex {len(verts)}', 'property float x', 'property float y', 'property float z',
        f'element face {len(faces)}', 'property list uchar int vertex_indices', 'end_header',
    ]
    lines += [f'{x:.6f} {y:.6f} {z:.6f}' for x, y, z in verts]
    lines += [f'3 {a} {b} {c}' for a, b, c in faces]
    Path(path).write_text('\n'.join(lines) + '\n')


def write_obj(mesh: ClassMesh, path: Union[str, Path]) -> None:
    verts, faces = mesh.xyz()
    lines = [f'# class {mesh.class_id}, units mm']
    lines += [f'v {x:.6f} {y:.6f} {z:.6f}' for x, y, z in verts]
    lines += [f'f {a + 1} {b + 1} {c + 1}' for a, b, c in faces]
    Path(path).write_text('\n'.join(lines) + '\n')


def _locate(labels: np.ndarray, spacing: Spacing) -> Tuple[Tuple[float, float], str]:
    labels = np.asarray(labels)
    for name, c in (('MH', MACULAR_HOLE), ('ME', MACULAR_EDEMA)):
        coords = np.argwhere(labels == c)
        if len(coords):
            return (float(coords[:, 1].mean() * spacing[1]), float(coords[:, 2].mean() * spacing[2])), name
    H, W = labels.shape[1:]
    return ((H - 1) / 2.0 * spacing[1], (W - 1) / 2.0 * spacing[2]), 'volume'


def locate_macula_center(labels: np.ndarray, spacing: Spacing,
                         override: Optional[Tuple[float, float]] = None) -> Tuple[float, float]:
    """En-face (h, w) mm of the hole centroid, else edema centroid, else the volume centre"""
    if override is not None:
        return float(override[0]), float(override[1])
    return _locate(labels, spacing)[0]


@dataclass
class EtdrsGrid:
    center: Tuple[float, float]
    spacing: Spacing
    shape: Tuple[int, int]
    laterality: str = 'OD'
    diameters: Tuple[float, float, float] = ETDRS_DIAMETERS_MM
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise DataError(f"Laterality must be OD or OS, got {self.laterality}")

    @property
    def radii_mm(self) -> Tuple[float, float, float]:
        return tuple(d / 2.0 for d in self.diameters)

    @property
    def radii_voxels(self) -> List[Tuple[float, float]]:
        """(along H, along W) radius of each circle in voxels"""
        return [(r / self.spacing[1], r / self.spacing[2]) for r in self.radii_mm]

    def classify(self, dh: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Sector index into SECTORS for mm offsets from the centre, -1 outside the outer circle.

        Circle boundaries belong to the inner region; a 45 degree ray belongs to the
        region counterclockwise of it.
        """
        r_f, r_i, r_o = self.radii_mm
        dh, dw = np.broadcast_arrays(np.asarray(dh, dtype=np.float64), np.asarray(dw, dtype=np.float64))
        radius = np.hypot(dh, dw)
        theta = np.degrees(np.arctan2(-dh, dw))
        quadrant = (np.floor(np.mod(theta - 45.0, 360.0) / 90.0).astype(np.int64)) % 4
        # quadrant 0 superior, 1 toward -w, 2 inferior, 3 toward +w
        if self.laterality == 'OD':
            names = ('S', 'T', 'I', 'N')
        else:
            names = ('S', 'N', 'I', 'T')
        inner = np.array([SECTORS.index('I' + n) for n in names])
        outer = np.array([SECTORS.index('O' + n) for n in names])

        out = np.full(radius.shape, -1, dtype=np.int64)
        out = np.where(radius <= r_o, outer[quadrant], out)
        out = np.where(radius <= r_i, inner[quadrant], out)
        out = np.where(radius <= r_f, SECTORS.index('F'), out)
        return out

    def region_map(self) -> np.ndarray:
        """(H, W) sector index of every en-face voxel centre"""
        H, W = self.shape
        dh = np.arange(H)[:, None] * self.spacing[1] - self.center[0]
        dw = np.arange(W)[None, :] * self.spacing[2] - self.center[1]
        return self.classify(dh, dw)


def build_etdrs_grid(center: Tuple[float, float], spacing: Spacing, shape: Tuple[int, int],
                     laterality: str = 'OD') -> EtdrsGrid:
    """Grid scaled to physical spacing; clipping by the volume border is recorded as a warning"""
    H, W = shape
    extent_h, extent_w = (H - 1) * spacing[1], (W - 1) * spacing[2]
    ch, cw = center
    if not (0.0 <= ch <= extent_h and 0.0 <= cw <= extent_w):
        raise DataError(f"Grid centre {center} mm lies outside the en-face extent ({extent_h:.3f}, {extent_w:.3f})")

    grid = EtdrsGrid(center=(float(ch), float(cw)), spacing=tuple(float(s) for s in spacing),
                     shape=(int(H), int(W)), laterality=laterality)
    for diameter, r in zip(grid.diameters, grid.radii_mm):
        if ch - r < 0 or cw - r < 0 or ch + r > extent_h or cw + r > extent_w:
            message = f"{diameter:g} mm circle extends beyond the scanned area and is clipped"
            grid.warnings.append(message)
            logger.warning(message)
    return grid


@dataclass
class EtdrsReport:
    """Voxel counts per (region, class); volumes are counts times the voxel volume"""
    counts: Dict[Tuple[str, str], int]
    voxel_volume_mm3: float
    laterality: str = 'OD'
    center: Tuple[float, float] = (0.0, 0.0)
    warnings: List[str] = field(default_factory=list)

    def volume(self, region: str, class_name: str) -> float:
        return self.counts[(region, class_name)] * self.voxel_volume_mm3

    def to_frame(self) -> pd.DataFrame:
        rows = [{'region': region, 'class': name, 'voxels': self.counts[(region, name)],
                 'volume_mm3': self.volume(region, name)}
                for name in QUANTIFIED_CLASSES for region in REGIONS]
        return pd.DataFrame(rows, columns=['region', 'class', 'voxels', 'volume_mm3'])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


def sector_volumes(labels: np.ndarray, grid: EtdrsGrid, spacing: Spacing) -> EtdrsReport:
    """Per-sector class volumes from the en-face projection of every voxel"""
    labels = np.asarray(labels)
    if tuple(labels.shape[1:]) != tuple(grid.shape):
        raise DataError(f"Grid built for en-face shape {grid.shape}, labels have {labels.shape[1:]}")
    regions = grid.region_map()
    counts: Dict[Tuple[str, str], int] = {}
    for name, c in QUANTIFIED_CLASSES.items():
        column = (labels == c).sum(axis=0)
        per_sector = np.bincount(regions[regions >= 0], weights=column[regions >= 0], minlength=len(SECTORS))
        for i, sector in enumerate(SECTORS):
            counts[(sector, name)] = int(round(per_sector[i]))
        counts[('IC', name)] = sum(counts[(s, name)] for s in INNER_CIRCLE)
        counts[('OC', name)] = sum(counts[(s, name)] for s in SECTORS)
    voxel_volume = float(np.prod(spacing))
    return EtdrsReport(counts=counts, voxel_volume_mm3=voxel_volume, laterality=grid.laterality,
                       center=grid.center, warnings=list(grid.warnings))


class Reconstructor:
    """Smooth, mesh, grid and quantify one labeled case"""

    def __init__(self, sigma: float = 1.0, iso: float = 0.5, laterality: str = 'OD', max_workers: int = 3):
        self.config = {
            'sigma': sigma,
            'iso': iso,
            'laterality': laterality,
            'max_workers': max_workers,
        }

    def _mesh(self, labels: np.ndarray, spacing: Spacing, c: int) -> ClassMesh:
        crop, origin = smooth_class_crop(labels, c, self.config['sigma'])
        if crop is None:
            return ClassMesh(class_id=c, empty=True)
        return extract_mesh(crop, self.config['iso'], spacing, class_id=c, origin=origin)

    def quantify(self, labels: np.ndarray, spacing: Spacing,
                 center: Optional[Tuple[float, float]] = None) -> EtdrsReport:
        labels = np.asarray(labels)
        if center is None:
            center, source = _locate(labels, spacing)
            logger.info(f"Macula centre from {source}: ({center[0]:.3f}, {center[1]:.3f}) mm")
        grid = build_etdrs_grid(center, spacing, labels.shape[1:], self.config['laterality'])
        return sector_volumes(labels, grid, spacing)

    def run(self, labels: np.ndarray, spacing: Spacing, out_dir: Union[str, Path], case: str = 'case',
            center: Optional[Tuple[float, float]] = None) -> Dict[str, Any]:
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise DataError(f"Labels must be 3D, got {labels.shape}")
        start = time.perf_counter()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written: List[Path] = []
        try:
            with ThreadPoolExecutor(max_workers=self.config['max_workers']) as pool:
                futures = {name: pool.submit(self._mesh, labels, spacing, c)
                           for name, c in QUANTIFIED_CLASSES.items()}
                meshes = {name: f.result() for name, f in futures.items()}
            report = self.quantify(labels, spacing, center)

            for name, mesh in meshes.items():
                for suffix, writer in (('ply', write_ply), ('obj', write_obj)):
                    path = out_dir / f"{case}_{name}.{suffix}"
                    writer(mesh, path)
                    written.append(path)
            report_path = out_dir / f"{case}_etdrs.csv"
            report.to_csv(report_path)
            written.append(report_path)
        except Exception:
            for path in written:
                path.unlink(missing_ok=True)
            raise

        elapsed = time.perf_counter() - start
        logger.info(f"Reconstructed {case} in {elapsed:.2f}s")
        return {
            'status': 'success',
            'meshes': meshes,
            'report': report,
            'files': [str(p) for p in written],
            'timing_s': elapsed,
        }


def reconstruct_case(labels: np.ndarray, spacing: Spacing, out_dir: Union[str, Path], sigma: float = 1.0,
                     iso: float = 0.5, laterality: str = 'OD', case: str = 'case',
                     center: Optional[Tuple[float, float]] = None) -> Dict[str, Any]:
    return Reconstructor(sigma, iso, laterality).run(labels, spacing, out_dir, case, center)
