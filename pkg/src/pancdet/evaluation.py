"""Run a detector over a dataset split and score it; the ablation grid."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box
from .config import RunConfig
from .data import Sample
from .metrics import Detection, MetricsReport, evaluate
from .model import Detector
from .training import train

log = logging.getLogger(__name__)

# (augmented pyramid, self-adaptive fusion, dependencies module)
ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, True, True),
    (True, True, False),
    (True, True, True),
)


def detect_split(model: Detector, samples: Sequence[Sample]) -> list[Detection]:
    out = []
    for s in samples:
        for d in model.detect(s.image_float()):
            out.append(Detection(s.name, Box(*d.box), d.score))
    return out


def evaluate_model(model: Detector, samples: Sequence[Sample]) -> MetricsReport:
    cfg = model.cfg
    gts = {s.name: s.boxes for s in samples}
    return evaluate(detect_split(model, samples), gts, cfg.score_threshold, cfg.eval_iou)


@dataclass
class AblationRow:
    augment_pyramid: bool
    feature_fusion: bool
    dc_module: bool
    report: MetricsReport


def run_ablation(train_samples, test_samples, cfg: RunConfig, grid=ABLATION_GRID) -> list[AblationRow]:
    rows = []
    for pyramid, fusion, dc in grid:
        run_cfg = cfg.replace(augment_pyramid=pyramid, feature_fusion=fusion, dc_module=dc)
        log.info("ablation: pyramid=%s fusion=%s dc=%s", pyramid, fusion, dc)
        model, _ = train(train_samples, run_cfg)
        rows.append(AblationRow(pyramid, fusion, dc, evaluate_model(model, test_samples)))
    return rows


def ablation_csv(runs: Sequence[Sequence[AblationRow]], seeds: Sequence[int]) -> str:
    """Six rows in grid order; ``accuracy`` is the mean over seeds, then one column per seed.

    Undefined rates (zero denominators) are written as ``undefined`` and
    left out of the mean.
    """
    if not runs or len(runs) != len(seeds):
        raise ValueError("need one ablation run per seed")

    def mark(b):
        return "x" if b else ""

    def num(v):
        return "undefined" if v is None else f"{v:.6f}"

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    head = ["augmented_feature_pyramid", "self_adaptive_feature_fusion", "dc_module", "accuracy", "sensitivity", "specificity", "auc"]
    head += [f"accuracy_seed{s}" for s in seeds]
    lines = [",".join(head)]
    for i, first in enumerate(runs[0]):
        reps = [run[i].report for run in runs]
        cells = [mark(first.augment_pyramid), mark(first.feature_fusion), mark(first.dc_module)]
        cells += [num(mean([getattr(r, k) for r in reps])) for k in ("accuracy", "sensitivity", "specificity", "auc")]
        cells += [num(r.accuracy) for r in reps]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
