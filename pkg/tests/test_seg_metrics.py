import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.special import comb
from sklearn.metrics import adjusted_rand_score

from defn.errors import DataError, NumericError
from defn.seg_metrics import (MACRO_ROW, ContingencyTable, MetricsInput, MetricsReport, adj_rand, adjusted_rand,
                              aggregate_reports, assd, class_adj_rand, dice_coef, evaluate_case, hausdorff, miou, surface_extract)

FACES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def surface_oracle(labels, c):
    shape = labels.shape
    points = []
    for p in map(tuple, np.argwhere(labels == c)):
        for f in FACES:
            q = tuple(a + b for a, b in zip(p, f))
            if not all(0 <= q[i] < shape[i] for i in range(3)) or labels[q] != c:
                points.append(p)
                break
    return np.array(points, dtype=np.int64).reshape(-1, 3)


def distance_oracle(pred, true, c, spacing):
    sp, st = surface_oracle(pred, c), surface_oracle(true, c)
    if len(sp) == 0 or len(st) == 0:
        return None
    d = cdist(sp * np.asarray(spacing), st * np.asarray(spacing))
    a, b = d.min(axis=1), d.min(axis=0)
    return (a.mean() + b.mean()) / 2, max(a.max(), b.max()), np.percentile(np.concatenate([a, b]), 95)


def ari_oracle(a, b):
    a, b = np.ravel(a), np.ravel(b)
    index = sum(comb(int(((a == i) & (b == j)).sum()), 2) for i in np.unique(a) for j in np.unique(b))
    sa = sum(comb(int((a == i).sum()), 2) for i in np.unique(a))
    sb = sum(comb(int((b == j).sum()), 2) for j in np.unique(b))
    expected = sa * sb / comb(a.size, 2)
    denominator = (sa + sb) / 2 - expected
    return 0.0 if denominator == 0 else (index - expected) / denominator


def overlap_grids():
    pred = np.zeros((2, 2, 2), dtype=np.uint8)
    true = np.zeros((2, 2, 2), dtype=np.uint8)
    pred.flat[[0, 1, 2, 3]] = 1
    true.flat[[1, 2, 3, 4]] = 1
    return pred, true


def test_overlap_hand_values():
    m = MetricsInput(*overlap_grids(), classes=(1,))
    assert miou(m).per_class[1] == pytest.approx(60.0)
    assert dice_coef(m).per_class[1] == pytest.approx(75.0)


def test_empty_class_is_flagged_and_skipped():
    pred, true = overlap_grids()
    m = MetricsInput(pred, true, classes=(1, 2))
    scores = miou(m)
    assert not scores.valid[2]
    assert math.isnan(scores.per_class[2])
    assert scores.mean == pytest.approx(60.0)
    assert not assd(m).valid[2]
    with pytest.raises(DataError):
        miou(MetricsInput(pred, true, classes=(3,)))


def test_disjoint_masks():
    pred = np.zeros((3, 3, 3), dtype=np.uint8)
    true = np.zeros((3, 3, 3), dtype=np.uint8)
    pred[0], true[2] = 1, 1
    m = MetricsInput(pred, true, classes=(1,))
    assert dice_coef(m).per_class[1] == 0.0
    assert miou(m).per_class[1] == 0.0


def test_surface_extraction():
    single = np.zeros((3, 3, 3), dtype=np.uint8)
    single[1, 1, 1] = 1
    assert surface_extract(single, 1).tolist() == [[1, 1, 1]]
    cube = np.zeros((5, 5, 5), dtype=np.uint8)
    cube[1:4, 1:4, 1:4] = 1
    points = surface_extract(cube, 1)
    assert len(points) == 26
    assert [2, 2, 2] not in points.tolist()
    assert surface_extract(cube, 2).shape == (0, 3)
    full = np.ones((3, 3, 3), dtype=np.uint8)
    assert len(surface_extract(full, 1)) == 26


def test_singletons_at_pythagorean_distance():
    pred = np.zeros((1, 4, 5), dtype=np.uint8)
    true = np.zeros((1, 4, 5), dtype=np.uint8)
    pred[0, 0, 0], true[0, 3, 4] = 1, 1
    m = MetricsInput(pred, true, classes=(1,))
    assert assd(m).per_class[1] == pytest.approx(5.0)
    assert hausdorff(m, 100).per_class[1] == pytest.approx(5.0)
    assert hausdorff(m, 95).per_class[1] == pytest.approx(5.0)
    with pytest.raises(DataError):
        hausdorff(m, 90)


def test_random_instances_match_exhaustive_oracles():
    rng = np.random.default_rng(0)
    spacing = (0.5, 1.0, 1.5)
    for _ in range(200):
        pred = rng.integers(0, 4, size=(8, 8, 8))
        true = rng.integers(0, 4, size=(8, 8, 8))
        m = MetricsInput(pred, true, spacing)
        sd, hd, hd95 = assd(m), hausdorff(m, 100), hausdorff(m, 95)
        iou, dsc = miou(m), dice_coef(m)
        for c in m.classes:
            assert np.array_equal(surface_extract(pred, c), surface_oracle(pred, c))
            expected = distance_oracle(pred, true, c, spacing)
            if expected is None:
                assert not sd.valid[c]
                continue
            assert sd.per_class[c] == pytest.approx(expected[0], abs=1e-9)
            assert hd.per_class[c] == pytest.approx(expected[1], abs=1e-9)
            assert hd95.per_class[c] == pytest.approx(expected[2], abs=1e-9)
            assert hd95.per_class[c] <= hd.per_class[c] + 1e-12
            assert iou.per_class[c] <= dsc.per_class[c] + 1e-12
        assert adj_rand(m) == pytest.approx(ari_oracle(pred, true), abs=1e-12)


def test_adjusted_rand_hand_values():
    a = np.array([0, 0, 1, 1])
    b = np.array([0, 1, 0, 1])
    assert adjusted_rand(a, b) == pytest.approx(-0.5)
    assert adjusted_rand(a, a) == 1.0
    assert adjusted_rand(np.zeros(4), b) == 0.0
    assert adjusted_rand(np.zeros(4), np.zeros(4)) == 0.0
    assert adjusted_rand(np.zeros(1), np.zeros(1)) == 0.0


def test_adjusted_rand_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.integers(0, 4, 100), rng.integers(0, 3, 100)
        assert adjusted_rand(a, b) == pytest.approx(adjusted_rand(b, a), abs=1e-12)


def test_adjusted_rand_matches_pair_counting():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        assert adjusted_rand(a, b) == pytest.approx(ari_oracle(a, b), abs=1e-12)


def test_degenerate_partitions_score_zero_unlike_sklearn():
    # sklearn reports 1 for identical single-cluster or all-singleton partitions
    single, singletons = np.zeros(6), np.arange(6)
    assert adjusted_rand_score(single, single) == 1.0
    assert adjusted_rand(single, single) == 0.0
    assert adjusted_rand_score(singletons, singletons) == 1.0
    assert adjusted_rand(singletons, singletons) == 0.0


def test_contingency_table_counts():
    table = ContingencyTable.from_labels(np.array([[0, 0], [1, 2]]), np.array([[5, 5], [5, 7]]))
    assert table.counts.tolist() == [[2, 0], [1, 0], [0, 1]]
    assert table.total == 4
    assert table.row_sums.tolist() == [2, 1, 1]


def test_distances_are_symmetric_and_scale_with_spacing():
    rng = np.random.default_rng(3)
    pred, true = rng.integers(0, 3, (6, 6, 6)), rng.integers(0, 3, (6, 6, 6))
    a, b = MetricsInput(pred, true, (1.0, 1.0, 1.0)), MetricsInput(true, pred, (1.0, 1.0, 1.0))
    scaled = MetricsInput(pred, true, (2.5, 2.5, 2.5))
    for metric in (assd, hausdorff, lambda x: hausdorff(x, 95)):
        for c in (1, 2):
            assert metric(a).per_class[c] == pytest.approx(metric(b).per_class[c], abs=1e-12)
            assert metric(scaled).per_class[c] == pytest.approx(2.5 * metric(a).per_class[c], abs=1e-9)


def test_sum_mode_doubles_symmetric_mean():
    rng = np.random.default_rng(4)
    pred, true = rng.integers(0, 3, (6, 6, 6)), rng.integers(0, 3, (6, 6, 6))
    mean = assd(MetricsInput(pred, true, classes=(1, 2)))
    total = assd(MetricsInput(pred, true, classes=(1, 2), assd_mode='sum'))
    for c in (1, 2):
        assert total.per_class[c] == pytest.approx(2 * mean.per_class[c])


def test_voxel_units_ignore_spacing():
    pred = np.zeros((1, 4, 5), dtype=np.uint8)
    true = np.zeros((1, 4, 5), dtype=np.uint8)
    pred[0, 0, 0], true[0, 3, 4] = 1, 1
    m = MetricsInput(pred, true, (0.1, 0.1, 0.1), classes=(1,), voxel_units=True)
    assert hausdorff(m).per_class[1] == pytest.approx(5.0)


def test_input_validation():
    with pytest.raises(DataError):
        MetricsInput(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(DataError):
        MetricsInput(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(DataError):
        MetricsInput(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), assd_mode='median')
    with pytest.raises(DataError):
        MetricsInput(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_unregistered_class_ids_are_rejected():
    pred = np.zeros((2, 2, 2), dtype=np.uint8)
    true = pred.copy()
    true[0, 0, 0] = 4
    with pytest.raises(DataError, match='not registered'):
        MetricsInput(pred, true)
    with pytest.raises(DataError, match='not registered'):
        evaluate_case(true, pred, (1.0, 1.0, 1.0))
    true[0, 0, 0] = 3
    assert MetricsInput(pred, true).classes == (1, 2, 3)


def test_perfect_case(make_lesion):
    v = make_lesion(shape=(16, 16, 16))
    report = evaluate_case(v.labels, v.labels, v.spacing, case='p')
    for name in ('retina', 'macular_hole', 'macular_edema', MACRO_ROW):
        row = report.row('p', name)
        assert row['miou_pct'] == 100.0 and row['dice_pct'] == 100.0
        assert row['assd_mm'] == 0.0 and row['hd_mm'] == 0.0 and row['hd95_mm'] == 0.0
        assert row['adj_rand'] == 1.0


def test_report_serialization_round_trips(tmp_path):
    pred, true = overlap_grids()
    report = evaluate_case(pred, true, (1.0, 1.0, 1.0), case='c1')
    report.to_csv(tmp_path / 'metrics.csv')
    assert MetricsReport.from_csv(tmp_path / 'metrics.csv') == report
    assert MetricsReport.from_json(report.to_json()) == report
    assert math.isnan(report.row('c1', 'macular_edema')['assd_mm'])


def test_report_fields_match_standalone_operations():
    rng = np.random.default_rng(5)
    pred, true = rng.integers(0, 4, (8, 8, 8)), rng.integers(0, 4, (8, 8, 8))
    spacing = (0.2, 0.1, 0.1)
    report = evaluate_case(pred, true, spacing, case='r')
    m = MetricsInput(pred, true, spacing)
    for c, name in ((1, 'retina'), (2, 'macular_hole'), (3, 'macular_edema')):
        row = report.row('r', name)
        assert row['miou_pct'] == miou(m).per_class[c]
        assert row['dice_pct'] == dice_coef(m).per_class[c]
        assert row['assd_mm'] == assd(m).per_class[c]
        assert row['hd_mm'] == hausdorff(m, 100).per_class[c]
        assert row['hd95_mm'] == hausdorff(m, 95).per_class[c]
        assert row['adj_rand'] == class_adj_rand(m, c)
    macro = report.macro('r')
    assert macro['adj_rand'] == adj_rand(m)
    assert macro['dice_pct'] == pytest.approx(dice_coef(m).mean)


def test_aggregation_averages_valid_rows():
    pred, true = overlap_grids()
    reports = [evaluate_case(pred, true, (1.0, 1.0, 1.0), case='a'),
               evaluate_case(true, true, (1.0, 1.0, 1.0), case='b')]
    merged = aggregate_reports(reports)
    assert len(merged) == 2 * 4 + 4
    assert merged.row('mean', 'retina')['dice_pct'] == pytest.approx((75.0 + 100.0) / 2)
    assert not merged.row('mean', 'macular_hole')['valid']
    with pytest.raises(DataError):
        aggregate_reports([])


def test_validate_rejects_out_of_range_values():
    pred, true = overlap_grids()
    report = evaluate_case(pred, true, (1.0, 1.0, 1.0))
    report.frame.loc[0, 'dice_pct'] = 120.0
    with pytest.raises(NumericError):
        report.validate()
