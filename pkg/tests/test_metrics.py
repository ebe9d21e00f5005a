import csv
import io

import numpy as np
import pytest

from pancdet.boxes import Box, iou, iou_matrix
from pancdet.metrics import (
    FROC_RATES,
    Counts,
    Detection,
    confusion_counts,
    confusion_metrics,
    evaluate,
    froc,
    froc_average,
    match_detections,
    roc_auc,
    roc_outcomes,
)
from oracles import PUBLISHED_FROC, pairwise_auc, random_int_boxes, random_score_set, raster_iou

# ------------------------------------------------------------------ IOU


def test_iou_hand_values():
    assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0
    assert iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-15)
    assert raster_iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)


def test_iou_matches_raster_oracle(rng):
    a, b = random_int_boxes(rng, 2000), random_int_boxes(rng, 2000)
    got = np.diag(iou_matrix(a.astype(float), b.astype(float)))
    ref = np.array([raster_iou(x, y) for x, y in zip(a, b)])
    np.testing.assert_allclose(got, ref, atol=1e-9)


def test_iou_symmetric_and_bounded(rng):
    a = random_int_boxes(rng, 50).astype(float)
    m = iou_matrix(a, a)
    np.testing.assert_allclose(m, m.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(m), 1.0)
    assert m.min() >= 0.0 and m.max() <= 1.0


# ------------------------------------------------------------------ matching


def _gt(*boxes):
    return np.array(boxes, dtype=float).reshape(-1, 4)


def test_match_single_above_threshold():
    # 10x10 gt, det shifted by 2: IOU 80/120
    m = match_detections([Detection("a", Box(2, 0, 12, 10), 0.9)], {"a": _gt([0, 0, 10, 10])})
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def test_match_single_below_threshold():
    m = match_detections([Detection("a", Box(5, 0, 15, 10), 0.9)], {"a": _gt([0, 0, 10, 10])})  # IOU 1/3
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_iou_exactly_half_is_not_valid():
    m = match_detections([Detection("a", Box(0, 0, 10, 20), 0.9)], {"a": _gt([0, 0, 10, 10])})
    assert (m.tp, m.fp) == (0, 1)


def test_greedy_single_use_of_gt():
    dets = [Detection("a", Box(1, 0, 11, 10), 0.8), Detection("a", Box(0, 0, 10, 10), 0.9)]
    m = match_detections(dets, {"a": _gt([0, 0, 10, 10])})
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    assert m.gt_hit_score == {("a", 0): 0.9}


def test_match_conserves_counts(rng):
    gts = {f"i{k}": random_int_boxes(rng, int(rng.integers(1, 4)), 100).astype(float) for k in range(20)}
    dets = []
    for k in gts:
        for b in random_int_boxes(rng, int(rng.integers(0, 6)), 100):
            dets.append(Detection(k, Box(*map(float, b)), float(rng.uniform())))
    m = match_detections(dets, gts)
    assert m.tp + m.fn == sum(len(g) for g in gts.values())
    assert m.tp + m.fp == len(dets)


def test_unknown_image_rejected():
    with pytest.raises(KeyError):
        match_detections([Detection("zz", Box(0, 0, 1, 1), 0.5)], {"a": _gt()})


def test_tumor_free_image_level_counts():
    gts = {"free1": _gt(), "free2": _gt(), "free3": _gt()}
    dets = [Detection("free1", Box(0, 0, 5, 5), 0.9), Detection("free1", Box(9, 9, 19, 19), 0.8), Detection("free2", Box(0, 0, 5, 5), 0.2)]
    counts = confusion_counts(match_detections(dets, gts), 0.5)
    assert counts == Counts(tp=0, fp=1, tn=2, fn=0)


# ------------------------------------------------------------------ confusion


def test_confusion_ratios():
    assert confusion_metrics(Counts(5, 1, 9, 5)) == pytest.approx((0.5, 0.9, 0.7))
    assert confusion_metrics(Counts(4, 0, 3, 0)) == (1.0, 1.0, 1.0)


def test_confusion_undefined_markers():
    r = confusion_metrics(Counts(0, 2, 3, 0))
    assert r.sensitivity is None and r.specificity == 0.6
    assert confusion_metrics(Counts(0, 0, 0, 0)) == (None, None, None)
    with pytest.raises(ValueError):
        confusion_metrics(Counts(-1, 0, 0, 0))


# ------------------------------------------------------------------ ROC / AUC


def _outcomes(pos, neg):
    return [(float(s), True) for s in pos] + [(float(s), False) for s in neg]


def test_auc_hand_values():
    assert roc_auc(_outcomes([0.9, 0.4], [0.6, 0.1]))[1] == pytest.approx(0.75, abs=1e-15)
    assert roc_auc(_outcomes([0.9, 0.8], [0.2, 0.1]))[1] == 1.0
    assert roc_auc(_outcomes([0.5] * 3, [0.5] * 4))[1] == 0.5


def test_auc_matches_pairwise_oracle(rng):
    for _ in range(1000):
        pos, neg = random_score_set(rng)
        assert abs(roc_auc(_outcomes(pos, neg))[1] - pairwise_auc(pos, neg)) <= 1e-9


def test_roc_points_monotone(rng):
    pos, neg = rng.uniform(size=30), rng.uniform(size=40) - 0.2
    points, _ = roc_auc(_outcomes(pos, neg))
    _, fpr, tpr = np.array(points).T
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)


@pytest.mark.parametrize("outcomes,missing", [([(0.3, True)], "negative"), ([(0.3, False)], "positive"), ([], "no outcomes")])
def test_auc_single_class_rejected(outcomes, missing):
    with pytest.raises(ValueError, match=missing):
        roc_auc(outcomes)


def test_roc_outcomes_convention():
    gts = {"t": _gt([0, 0, 10, 10], [50, 50, 60, 60]), "f": _gt()}
    dets = [
        Detection("t", Box(0, 0, 10, 10), 0.9),
        Detection("t", Box(80, 80, 90, 90), 0.4),
        Detection("f", Box(0, 0, 5, 5), 0.3),
        Detection("f", Box(9, 9, 19, 19), 0.7),
    ]
    got = sorted(roc_outcomes(match_detections(dets, gts)))
    # missed gt at 0, free image scored by its best detection
    assert got == sorted([(0.9, True), (0.4, False), (0.0, True), (0.7, False)])


# ------------------------------------------------------------------ FROC


def test_froc_average_of_published_sensitivities():
    assert froc_average(PUBLISHED_FROC) == pytest.approx(0.901, abs=5e-4)


def test_froc_perfect_detector():
    gts = {f"i{k}": _gt([10, 10, 30, 30]) for k in range(4)}
    dets = [Detection(k, Box(10, 10, 30, 30), 1.0) for k in gts]
    points, avg = froc(match_detections(dets, gts))
    assert [r for r, _ in points] == list(FROC_RATES)
    assert all(s == 1.0 for _, s in points) and avg == 1.0


def test_froc_empty_detector():
    gts = {f"i{k}": _gt([10, 10, 30, 30]) for k in range(4)}
    points, avg = froc(match_detections([], gts))
    assert all(s == 0.0 for _, s in points) and avg == 0.0


def test_froc_threshold_selection_hand_example():
    # 2 scans, 2 gts; sorted: TP .9, FP .8, FP .7, TP .6
    gts = {"a": _gt([0, 0, 10, 10]), "b": _gt([0, 0, 10, 10])}
    dets = [
        Detection("a", Box(0, 0, 10, 10), 0.9),
        Detection("a", Box(40, 40, 50, 50), 0.8),
        Detection("b", Box(40, 40, 50, 50), 0.7),
        Detection("b", Box(0, 0, 10, 10), 0.6),
    ]
    points, _ = froc(match_detections(dets, gts))
    # FP/scan: 0 at .9, .5 at .8, 1 at .7 and .6
    assert dict(points) == {0.125: 0.5, 0.25: 0.5, 0.5: 0.5, 1.0: 1.0, 2.0: 1.0, 4.0: 1.0, 8.0: 1.0}


def test_froc_monotone_in_rate(rng):
    gts = {f"i{k}": random_int_boxes(rng, 1, 100).astype(float) for k in range(10)}
    dets = []
    for k, g in gts.items():
        dets.append(Detection(k, Box(*g[0]), float(rng.uniform())))
        for b in random_int_boxes(rng, 5, 100):
            dets.append(Detection(k, Box(*map(float, b)), float(rng.uniform())))
    sens = [s for _, s in froc(match_detections(dets, gts))[0]]
    assert all(b >= a for a, b in zip(sens, sens[1:]))


def test_froc_empty_scan_set():
    with pytest.raises(ValueError):
        froc(match_detections([], {}))


# ------------------------------------------------------------------ report


def test_report_csvs():
    gts = {"t": _gt([0, 0, 10, 10]), "f": _gt()}
    dets = [Detection("t", Box(0, 0, 10, 10), 0.9), Detection("f", Box(0, 0, 5, 5), 0.2)]
    rep = evaluate(dets, gts)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (1, 0, 1, 0)
    assert rep.auc == 1.0
    lines = rep.report_csv().splitlines()
    assert lines[0].startswith("#")
    rows = dict(csv.reader(io.StringIO("\n".join(lines[1:]))))
    assert rows["metric"] == "value" and float(rows["accuracy"]) == 1.0
    assert rep.roc_csv().splitlines()[0] == "threshold,fpr,tpr"
    assert rep.froc_csv().splitlines()[0] == "rate,sensitivity"
    assert len(rep.froc_csv().splitlines()) == 8


def test_report_undefined_marker():
    rep = evaluate([], {"f": _gt()})
    assert rep.auc is None
    assert dict(rep.summary_rows())["sensitivity"] == "undefined"
