"""
Segmentation Metrics
MIoU, Dice, ASSD, HD, HD95 and adjusted Rand index per class and per case
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from sklearn.metrics import adjusted_rand_score
from sklearn.metrics.cluster import contingency_matrix

from .errors import DataError, NumericError
from .volume_io import DEFAULT_CLASS_MAP, ClassMap

logger = logging.getLogger(__name__)

DEFAULT_CLASSES = (1, 2, 3)
ASSD_MODES = ('symmetric_mean', 'sum')
REPORT_COLUMNS = ['case', 'class', 'miou_pct', 'dice_pct', 'assd_mm', 'hd_mm', 'hd95_mm', 'adj_rand', 'valid']
FLOAT_COLUMNS = ['miou_pct', 'dice_pct', 'assd_mm', 'hd_mm', 'hd95_mm', 'adj_rand']
MACRO_ROW = 'All'

FACE_STRUCTURE = generate_binary_structure(3, 1)


@dataclass
class MetricsInput:
    pred_labels: np.ndarray
    true_labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    classes: Sequence[int] = DEFAULT_CLASSES
    voxel_units: bool = False
    assd_mode: str = 'symmetric_mean'
    class_map: ClassMap = DEFAULT_CLASS_MAP

    def __post_init__(self):
        self.pred_labels = np.asarray(self.pred_labels)
        self.true_labels = np.asarray(self.true_labels)
        if self.pred_labels.shape != self.true_labels.shape:
            raise DataError(f"Prediction {self.pred_labels.shape} and truth {self.true_labels.shape} differ")
        if self.pred_labels.ndim != 3:
            raise DataError(f"Label grids must be 3D, got {self.pred_labels.shape}")
        if min(self.pred_labels.min(initial=0), self.true_labels.min(initial=0)) < 0:
            raise DataError("Label grids hold negative class ids")
        top = max(self.pred_labels.max(initial=0), self.true_labels.max(initial=0))
        if top >= self.class_map.num_classes:
            raise DataError(f"Class id {int(top)} is not registered (map holds {self.class_map.num_classes} classes)")
        if self.assd_mode not in ASSD_MODES:
            raise DataError(f"Unknown ASSD mode: {self.assd_mode}")
        if min(self.spacing) <= 0:
            raise DataError(f"Spacing must be positive, got {self.spacing}")
        self.classes = tuple(int(c) for c in self.classes)

    @property
    def sampling(self) -> Optional[Tuple[float, float, float]]:
        return None if self.voxel_units else tuple(float(s) for s in self.spacing)

    def masks(self, c: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.pred_labels == c, self.true_labels == c


@dataclass
class ClassScores:
    per_class: Dict[int, float] = field(default_factory=dict)
    valid: Dict[int, bool] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        values = [v for c, v in self.per_class.items() if self.valid[c]]
        return float(np.mean(values)) if values else math.nan


@dataclass
class ContingencyTable:
    counts: np.ndarray

    @classmethod
    def from_labels(cls, a: np.ndarray, b: np.ndarray) -> 'ContingencyTable':
        return cls(counts=contingency_matrix(np.asarray(a).ravel(), np.asarray(b).ravel()))

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _pairs(x) -> int:
    return sum(int(v) * (int(v) - 1) // 2 for v in np.asarray(x).ravel())


def _overlap_scores(m: MetricsInput, dice: bool) -> ClassScores:
    scores = ClassScores()
    for c in m.classes:
        pred, true = m.masks(c)
        p, t = int(pred.sum()), int(true.sum())
        if p == 0 and t == 0:
            scores.per_class[c], scores.valid[c] = math.nan, False
            continue
        inter = int(np.logical_and(pred, true).sum())
        if dice:
            value = 200.0 * inter / (p + t)
        else:
            value = 100.0 * inter / (p + t - inter)
        scores.per_class[c], scores.valid[c] = value, True
    if not any(scores.valid.values()):
        raise DataError(f"Every evaluated class {list(m.classes)} is empty in both grids")
    return scores


def miou(m: MetricsInput) -> ClassScores:
    return _overlap_scores(m, dice=False)


def dice_coef(m: MetricsInput) -> ClassScores:
    return _overlap_scores(m, dice=True)


def _surface_mask(mask: np.ndarray) -> np.ndarray:
    # out-of-bounds counts as outside the class
    return mask & ~binary_erosion(mask, structure=FACE_STRUCTURE, border_value=0)


def surface_extract(labels: np.ndarray, c: int) -> np.ndarray:
    """(K, 3) coordinates of class-c voxels with a face neighbour outside the class"""
    mask = np.asarray(labels) == c
    if not mask.any():
        return np.zeros((0, 3), dtype=np.int64)
    return np.argwhere(_surface_mask(mask))


def directed_distances(m: MetricsInput, c: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Surface-to-surface minimum distances pred->truth and truth->pred, or None if a surface is empty"""
    pred, true = m.masks(c)
    if not pred.any() or not true.any():
        return None
    pred_border, true_border = _surface_mask(pred), _surface_mask(true)
    pred_to_true = distance_transform_edt(~true_border, sampling=m.sampling)[pred_border]
    true_to_pred = distance_transform_edt(~pred_border, sampling=m.sampling)[true_border]
    return pred_to_true, true_to_pred


def _distance_scores(m: MetricsInput, reduce) -> ClassScores:
    scores = ClassScores()
    for c in m.classes:
        d = directed_distances(m, c)
        if d is None:
            scores.per_class[c], scores.valid[c] = math.nan, False
        else:
            scores.per_class[c], scores.valid[c] = float(reduce(*d)), True
    return scores


def assd(m: MetricsInput) -> ClassScores:
    if m.assd_mode == 'sum':
        return _distance_scores(m, lambda a, b: a.mean() + b.mean())
    return _distance_scores(m, lambda a, b: (a.mean() + b.mean()) / 2.0)


def hausdorff(m: MetricsInput, percentile: int = 100) -> ClassScores:
    if percentile == 100:
        return _distance_scores(m, lambda a, b: max(a.max(), b.max()))
    if percentile == 95:
        return _distance_scores(m, lambda a, b: np.percentile(np.concatenate([a, b]), 95))
    raise DataError(f"Hausdorff percentile must be 100 or 95, got {percentile}")


def adjusted_rand(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index; a zero denominator gives 0 where sklearn would report 1"""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    table = ContingencyTable.from_labels(a, b)
    n_pairs = _pairs([table.total])
    if n_pairs == 0:
        return 0.0
    sum_a = _pairs(table.row_sums)
    sum_b = _pairs(table.col_sums)
    if 2 * sum_a * sum_b == n_pairs * (sum_a + sum_b):
        return 0.0
    return float(adjusted_rand_score(a, b))


def adj_rand(m: MetricsInput) -> float:
    if m.pred_labels.size == 0:
        raise DataError("Adjusted Rand index needs non-empty grids")
    return adjusted_rand(m.pred_labels, m.true_labels)


def class_adj_rand(m: MetricsInput, c: int) -> float:
    pred, true = m.masks(c)
    return adjusted_rand(pred, true)


class MetricsReport:
    """One row per (case, class) plus macro rows; distances are NaN where undefined"""

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError(f"Report is missing columns {missing}")
        frame = frame[REPORT_COLUMNS].reset_index(drop=True).copy()
        frame['case'] = frame['case'].astype(str)
        frame['class'] = frame['class'].astype(str)
        frame[FLOAT_COLUMNS] = frame[FLOAT_COLUMNS].astype(np.float64)
        frame['valid'] = frame['valid'].astype(bool)
        self.frame = frame

    def validate(self) -> 'MetricsReport':
        f = self.frame
        for col in ('miou_pct', 'dice_pct'):
            v = f[col].dropna()
            if ((v < 0) | (v > 100)).any():
                raise NumericError(f"{col} outside [0, 100]")
        for col in ('assd_mm', 'hd_mm', 'hd95_mm'):
            if (f[col].dropna() < 0).any():
                raise NumericError(f"{col} negative")
        ari = f['adj_rand'].dropna()
        if ((ari < -1 - 1e-12) | (ari > 1 + 1e-12)).any():
            raise NumericError("adj_rand outside [-1, 1]")
        return self

    def macro(self, case: Optional[str] = None) -> pd.Series:
        rows = self.frame[self.frame['class'] == MACRO_ROW]
        if case is not None:
            rows = rows[rows['case'] == case]
        return rows.iloc[0]

    def row(self, case: str, class_name: str) -> pd.Series:
        rows = self.frame[(self.frame['case'] == case) & (self.frame['class'] == class_name)]
        if rows.empty:
            raise KeyError(f"No row for case={case} class={class_name}")
        return rows.iloc[0]

    def to_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'MetricsReport':
        return cls(pd.read_csv(path, keep_default_na=True, float_precision='round_trip'))

    def to_dict(self) -> Dict[str, List]:
        records = self.frame.to_dict(orient='records')
        for r in records:
            for col in FLOAT_COLUMNS:
                if isinstance(r[col], float) and math.isnan(r[col]):
                    r[col] = None
        return {'columns': REPORT_COLUMNS, 'rows': records}

    @classmethod
    def from_dict(cls, payload: Dict[str, List]) -> 'MetricsReport':
        frame = pd.DataFrame(payload['rows'], columns=payload.get('columns', REPORT_COLUMNS))
        return cls(frame)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'MetricsReport':
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.frame.equals(other.frame)

    def __len__(self) -> int:
        return len(self.frame)

    def __repr__(self) -> str:
        return f"MetricsReport({len(self.frame)} rows)"


def _macro_row(case: str, rows: List[Dict], ari: float) -> Dict:
    def mean(col):
        values = [r[col] for r in rows if r['valid'] and not math.isnan(r[col])]
        return float(np.mean(values)) if values else math.nan

    return {
        'case': case, 'class': MACRO_ROW,
        'miou_pct': mean('miou_pct'), 'dice_pct': mean('dice_pct'),
        'assd_mm': mean('assd_mm'), 'hd_mm': mean('hd_mm'), 'hd95_mm': mean('hd95_mm'),
        'adj_rand': ari, 'valid': any(r['valid'] for r in rows),
    }


def evaluate_case(pred: np.ndarray, truth: np.ndarray, spacing: Tuple[float, float, float],
                  case: str = 'case', classes: Sequence[int] = DEFAULT_CLASSES,
                  class_map: ClassMap = DEFAULT_CLASS_MAP, assd_mode: str = 'symmetric_mean',
                  voxel_units: bool = False) -> MetricsReport:
    """All six metrics per class plus the macro row over valid classes"""
    m = MetricsInput(pred, truth, spacing, classes, voxel_units, assd_mode, class_map)
    iou, dsc = miou(m), dice_coef(m)
    sd, hd, hd95 = assd(m), hausdorff(m, 100), hausdorff(m, 95)

    rows = []
    for c in m.classes:
        rows.append({
            'case': case,
            'class': class_map.name_of(c) if c < class_map.num_classes else str(c),
            'miou_pct': iou.per_class[c],
            'dice_pct': dsc.per_class[c],
            'assd_mm': sd.per_class[c],
            'hd_mm': hd.per_class[c],
            'hd95_mm': hd95.per_class[c],
            'adj_rand': class_adj_rand(m, c) if iou.valid[c] else math.nan,
            'valid': iou.valid[c],
        })
    rows.append(_macro_row(case, rows, adj_rand(m)))
    return MetricsReport(pd.DataFrame(rows, columns=REPORT_COLUMNS)).validate()


def aggregate_reports(reports: Iterable[MetricsReport], label: str = 'mean') -> MetricsReport:
    """Stack per-case reports and append per-class means over valid, defined entries"""
    reports = list(reports)
    if not reports:
        raise DataError("No reports to aggregate")
    per_case = pd.concat([r.frame for r in reports], ignore_index=True)
    summary = []
    for name, group in per_case.groupby('class', sort=False):
        valid = group[group['valid']]
        row = {'case': label, 'class': name, 'valid': not valid.empty}
        for col in FLOAT_COLUMNS:
            row[col] = float(valid[col].mean(skipna=True)) if not valid[col].dropna().empty else math.nan
        summary.append(row)
    frame = pd.concat([per_case, pd.DataFrame(summary, columns=REPORT_COLUMNS)], ignore_index=True)
    return MetricsReport(frame).validate()
