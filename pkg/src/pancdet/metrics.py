"""Detection evaluation: IOU, greedy matching, confusion rates, ROC/AUC and FROC.

Conventions:

* a detection is valid when its IOU with an unmatched ground truth is
  strictly greater than the threshold (0.5 by default);
* tumor-free images are image-level negatives: TN when no detection
  clears the operating threshold, FP otherwise;
* ROC outcomes are matched detections (TP positive, FP negative) on
  tumor-bearing images, missed tumors as positives scored 0, and one
  negative per tumor-free image scored by its best detection.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import boxes as bx
from .boxes import Box, iou

FROC_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

__all__ = [
    "Detection",
    "iou",
    "match_detections",
    "confusion_counts",
    "confusion_metrics",
    "roc_auc",
    "froc",
    "froc_average",
    "evaluate",
]


class Detection(NamedTuple):
    image_id: str
    box: Box
    score: float


class Outcome(NamedTuple):
    image_id: str
    score: float
    is_tp: bool


@dataclass
class MatchResult:
    outcomes: list[Outcome]
    n_gt: int
    gt_hit_score: dict[tuple[str, int], float]  # (image, gt index) -> score of its TP detection
    tumor_images: set[str]
    free_images: set[str]

    @property
    def tp(self) -> int:
        return sum(o.is_tp for o in self.outcomes)

    @property
    def fp(self) -> int:
        return sum(not o.is_tp for o in self.outcomes)

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


class Counts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


class Rates(NamedTuple):
    """``None`` marks a ratio whose denominator is zero."""

    sensitivity: float | None
    specificity: float | None
    accuracy: float | None


def match_detections(dets: Iterable[Detection], gts: dict[str, np.ndarray], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching; each ground truth is used at most once.

    ``gts`` maps every evaluated image id to its ``(k, 4)`` boxes (possibly
    empty). Detections on unknown images raise ``KeyError``.
    """
    by_image: dict[str, list[Detection]] = {k: [] for k in gts}
    for d in dets:
        if d.image_id not in by_image:
            raise KeyError(f"detection on unknown image {d.image_id!r}")
        by_image[d.image_id].append(d)
    outcomes: list[Outcome] = []
    hit: dict[tuple[str, int], float] = {}
    n_gt = 0
    tumor, free = set(), set()
    for image_id in sorted(by_image):
        g = bx.as_array(gts[image_id])
        n_gt += len(g)
        (tumor if len(g) else free).add(image_id)
        used = np.zeros(len(g), dtype=bool)
        for d in sorted(by_image[image_id], key=lambda d: -d.score):
            is_tp = False
            if len(g):
                ious = bx.iou_matrix([d.box], g)[0]
                ious[used] = -1.0
                j = int(np.argmax(ious))
                if ious[j] > iou_threshold:
                    used[j] = True
                    hit[(image_id, j)] = d.score
                    is_tp = True
            outcomes.append(Outcome(image_id, float(d.score), is_tp))
    return MatchResult(outcomes, n_gt, hit, tumor, free)


def confusion_counts(match: MatchResult, score_threshold: float = 0.5) -> Counts:
    tp = fp = tn = 0
    flagged = set()
    for o in match.outcomes:
        if o.score < score_threshold:
            continue
        if o.image_id in match.free_images:
            flagged.add(o.image_id)
        elif o.is_tp:
            tp += 1
        else:
            fp += 1
    fp += len(flagged)
    tn = len(match.free_images) - len(flagged)
    return Counts(tp, fp, tn, match.n_gt - tp)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def confusion_metrics(counts) -> Rates:
    tp, fp, tn, fn = counts
    if min(tp, fp, tn, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    return Rates(_ratio(tp, tp + fn), _ratio(tn, tn + fp), _ratio(tp + tn, tp + tn + fp + fn))


def roc_auc(scored_outcomes: Sequence[tuple[float, bool]]):
    """ROC points ``(threshold, fpr, tpr)`` and trapezoidal AUC.

    Equal scores form one threshold step, so ties contribute a diagonal
    segment.
    """
    if len(scored_outcomes) == 0:
        raise ValueError("roc_auc: no outcomes")
    scores = np.asarray([s for s, _ in scored_outcomes], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in scored_outcomes])
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0:
        raise ValueError("roc_auc: no positive outcomes")
    if n_neg == 0:
        raise ValueError("roc_auc: no negative outcomes")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tps = np.cumsum(labels)[distinct]
    fps = np.cumsum(~labels)[distinct]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, scores[distinct]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = list(zip(thresholds.tolist(), fpr.tolist(), tpr.tolist()))
    return points, auc


def roc_outcomes(match: MatchResult) -> list[tuple[float, bool]]:
    out = []
    best_free: dict[str, float] = {k: 0.0 for k in match.free_images}
    for o in match.outcomes:
        if o.image_id in match.free_images:
            best_free[o.image_id] = max(best_free[o.image_id], o.score)
        else:
            out.append((o.score, o.is_tp))
    out += [(0.0, True)] * (match.n_gt - len(match.gt_hit_score))
    out += [(s, False) for _, s in sorted(best_free.items())]
    return out


def froc(match: MatchResult, n_scans: int | None = None, rates: Sequence[float] = FROC_RATES):
    """Sensitivity at each target FP/scan rate and their mean.

    For each rate, the lowest score threshold whose FP count per scan does
    not exceed the rate is used; no interpolation.
    """
    n_scans = len(match.tumor_images) + len(match.free_images) if n_scans is None else n_scans
    if n_scans <= 0:
        raise ValueError("froc: empty scan set")
    if not match.outcomes or match.n_gt == 0:
        sens = [0.0] * len(rates)
        return list(zip(rates, sens)), froc_average(sens)
    scores = np.asarray([o.score for o in match.outcomes])
    tp = np.asarray([o.is_tp for o in match.outcomes])
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    distinct = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    fp_rate = np.r_[0.0, np.cumsum(~tp)[distinct] / n_scans]
    sens = np.r_[0.0, np.cumsum(tp)[distinct] / match.n_gt]
    points = []
    for r in rates:
        ok = fp_rate <= r + 1e-12
        points.append((float(r), float(sens[ok].max())))
    return points, froc_average([s for _, s in points])


def froc_average(sensitivities: Sequence[float]) -> float:
    return float(np.mean(sensitivities)) if len(sensitivities) else 0.0


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    auc: float | None
    froc_average: float
    roc_points: list = field(default_factory=list)
    froc_points: list = field(default_factory=list)
    score_threshold: float = 0.5
    iou_threshold: float = 0.5

    HEADER = (
        "# ROC over matched detections (TP positive, FP negative) on tumor images, "
        "missed tumors as positives at score 0, one negative per tumor-free image at its best score"
    )

    def summary_rows(self) -> list[tuple[str, str]]:
        def fmt(v):
            return "undefined" if v is None else repr(v)

        return [
            ("tp", str(self.tp)),
            ("fp", str(self.fp)),
            ("tn", str(self.tn)),
            ("fn", str(self.fn)),
            ("sensitivity", fmt(self.sensitivity)),
            ("specificity", fmt(self.specificity)),
            ("accuracy", fmt(self.accuracy)),
            ("auc", fmt(self.auc)),
            ("froc_average", repr(self.froc_average)),
            ("score_threshold", repr(self.score_threshold)),
            ("iou_threshold", repr(self.iou_threshold)),
        ]

    def report_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.summary_rows())
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        w.writerows([(repr(t), repr(f), repr(p)) for t, f, p in self.roc_points])
        return buf.getvalue()

    def froc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rate", "sensitivity"])
        w.writerows([(repr(r), repr(s)) for r, s in self.froc_points])
        return buf.getvalue()


def evaluate(dets: Iterable[Detection], gts: dict[str, np.ndarray], score_threshold: float = 0.5, iou_threshold: float = 0.5) -> MetricsReport:
    match = match_detections(dets, gts, iou_threshold)
    counts = confusion_counts(match, score_threshold)
    rates = confusion_metrics(counts)
    try:
        roc_points, auc = roc_auc(roc_outcomes(match))
    except ValueError:
        roc_points, auc = [], None
    froc_points, froc_avg = froc(match)
    return MetricsReport(*counts, *rates, auc, froc_avg, roc_points, froc_points, score_threshold, iou_threshold)
