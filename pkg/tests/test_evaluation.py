import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulift.evaluation import boundary_band, compute_metrics, iou_matrix, match_instances


def blocks():
    gt = np.zeros((20, 20), np.int64)
    gt[2:10, 2:10] = 1
    gt[12:18, 4:16] = 2
    gt[2:8, 13:19] = 3
    return gt


def test_identical_masks_score_one():
    gt = blocks()
    rep = compute_metrics([gt], [gt])
    assert rep.miou == 1.0 and rep.fscore == 1.0 and rep.mbiou == 1.0
    assert rep.precision == 1.0 and rep.recall == 1.0


def test_half_covered_instance_has_iou_half():
    gt = np.zeros((4, 4), np.int64)
    gt[:, :2] = 1
    pred = np.zeros_like(gt)
    pred[:2, :2] = 1
    rep = compute_metrics([pred], [gt])
    assert rep.miou == pytest.approx(0.5)
    assert rep.fscore == 1.0  # IoU 0.5 counts as a hit


def test_prediction_ids_are_arbitrary():
    gt = blocks()
    lut = np.array([0, 7, 3, 9])
    rep = compute_metrics([lut[gt]], [gt])
    assert rep.miou == 1.0
    assert sorted((p, g) for p, g, _ in match_instances(iou_matrix(lut[gt], gt)).pairs) == [(3, 2), (7, 1), (9, 3)]


def test_missed_instances_give_recall_half_and_f_two_thirds():
    gt = np.zeros((10, 10), np.int64)
    gt[0:5, 0:5] = 1
    gt[0:5, 5:10] = 2
    gt[5:10, 0:5] = 3
    gt[5:10, 5:10] = 4
    pred = np.where(np.isin(gt, [1, 2]), gt, 0)
    rep = compute_metrics([pred], [gt])
    assert rep.recall == pytest.approx(0.5) and rep.precision == 1.0
    assert rep.fscore == pytest.approx(2 / 3)
    assert rep.miou == pytest.approx(0.5)


def test_views_are_aggregated_before_matching():
    gt = [np.array([[1, 1, 0, 0]]), np.array([[1, 1, 0, 0]])]
    pred = [np.array([[1, 1, 0, 0]]), np.array([[1, 0, 0, 0]])]
    assert compute_metrics(pred, gt).miou == pytest.approx(3 / 4)
    assert compute_metrics(pred, gt, per_view=True).miou == pytest.approx((1 + 0.5) / 2)


def test_extra_predictions_lower_precision_only():
    gt = np.zeros((6, 6), np.int64)
    gt[:3] = 1
    pred = gt.copy()
    pred[4:, 4:] = 2
    rep = compute_metrics([pred], [gt])
    assert rep.miou == 1.0 and rep.precision == 0.5 and rep.recall == 1.0


def test_empty_ground_truth():
    z = np.zeros((3, 3), np.int64)
    rep = compute_metrics([z], [z])
    assert rep.miou == 1.0 and rep.recall == 1.0 and rep.precision == 1.0


def test_shape_and_count_mismatch_raise():
    with pytest.raises(ValueError, match="dimension mismatch"):
        compute_metrics([np.zeros((3, 3), int)], [np.zeros((3, 4), int)])
    with pytest.raises(ValueError, match="views"):
        compute_metrics([np.zeros((3, 3), int)] * 2, [np.zeros((3, 3), int)])


def test_boundary_band_width():
    mask = np.zeros((20, 20), np.int64)
    mask[:, 10:] = 1
    band = boundary_band(mask, width=3)
    cols = np.flatnonzero(band[10] > 0)
    assert cols.tolist() == [10, 11, 12, 17, 18, 19]  # near the label change and the image border


def test_boundary_iou_sees_ragged_edges_more_than_iou():
    gt = blocks()
    pred = gt.copy()
    pred[2:10, 9] = 0
    rep = compute_metrics([pred], [gt])
    assert rep.mbiou < rep.miou < 1.0


def test_csv_and_text(tmp_path):
    gt = blocks()
    rep = compute_metrics([gt], [gt])
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "pred_id,gt_id,iou,biou" and len(lines) == 1 + 3 + 3
    assert rep.to_text().splitlines()[0] == "miou=1.000000"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_invariant_to_relabelling_and_bounded(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=(12, 12))
    pred = rng.integers(0, 5, size=(12, 12))
    rep = compute_metrics([pred], [gt])
    lut = np.concatenate([[0], rng.permutation(np.arange(1, 5)) + 10])
    rep2 = compute_metrics([lut[pred]], [gt])
    assert rep.miou == pytest.approx(rep2.miou) and rep.fscore == pytest.approx(rep2.fscore)
    for v in (rep.miou, rep.fscore, rep.mbiou, rep.precision, rep.recall):
        assert 0.0 <= v <= 1.0
