"""Average precision / recall for the toy detector.

Matching is greedy in descending confidence: each prediction takes the
unmatched same-class truth with the highest IoU at or above the threshold.
AP is the all-points interpolated area under the precision-recall curve,
computed per class and averaged over classes that have at least one truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from konvlina.toy.scene import BAND_NAMES, Box, box_iou, size_band


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    cls: int
    score: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"detection has non-finite coordinates: {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    @property
    def xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class APResult:
    AP: float
    AR: float
    AP_S: float
    AP_M: float
    AP_L: float

    def as_dict(self) -> dict[str, float]:
        return {"AP": self.AP, "AR": self.AR, "AP_S": self.AP_S, "AP_M": self.AP_M, "AP_L": self.AP_L}


def interpolated_ap(tp_flags: Sequence[bool], n_truth: int) -> float:
    """All-points AP from score-ordered true-positive flags."""
    if n_truth == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    recall = np.concatenate([[0.0], tp / n_truth])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    # Envelope: best precision at this recall or any higher one.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def _match_scene(preds: list[Detection], truths: list[Box], cls: int, thr: float,
                 ignore: list[bool]) -> list[tuple[float, bool | None]]:
    """Score and outcome per prediction: True (TP), False (FP), None (ignored)."""
    gts = [(t, ig) for t, ig in zip(truths, ignore) if t.cls == cls]
    used = [False] * len(gts)
    out = []
    for p in preds:
        best, best_iou = -1, thr
        # Non-ignored truths win over ignored ones at any IoU.
        for want_ignored in (False, True):
            for j, (t, ig) in enumerate(gts):
                if used[j] or ig != want_ignored:
                    continue
                iou = box_iou(p.xyxy, t.xyxy)
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                break
        if best >= 0:
            used[best] = True
            out.append((p.score, None if gts[best][1] else True))
        else:
            out.append((p.score, False))
    return out


def _ap_recall(predictions, truths, thr: float, band: int | None) -> tuple[float, float]:
    classes = sorted({t.cls for gts in truths for t in gts
                      if band is None or size_band(t.w, t.h) == band})
    if not classes:
        return 0.0, 0.0
    aps, recalls = [], []
    for cls in classes:
        scored = []
        n_truth = 0
        for preds, gts in zip(predictions, truths):
            ignore = [band is not None and size_band(t.w, t.h) != band for t in gts]
            n_truth += sum(1 for t, ig in zip(gts, ignore) if t.cls == cls and not ig)
            mine = sorted((p for p in preds if p.cls == cls), key=lambda p: -p.score)
            for p, (score, outcome) in zip(mine, _match_scene(mine, gts, cls, thr, ignore)):
                if outcome is None:
                    continue
                if outcome is False and band is not None and size_band(p.w, p.h) != band:
                    continue
                scored.append((score, outcome))
        # Stable sort keeps scene order among equal scores.
        scored.sort(key=lambda s: -s[0])
        flags = [o for _, o in scored]
        aps.append(interpolated_ap(flags, n_truth))
        recalls.append(sum(flags) / n_truth if n_truth else 0.0)
    return float(np.mean(aps)), float(np.mean(recalls))


def evaluate_ap(predictions: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Box]],
                iou_threshold: float = 0.5, sweep: bool = False) -> APResult:
    """AP/AR over a dataset; one prediction list and one truth list per scene.

    With ``sweep`` the headline AP and AR average over IoU thresholds
    0.50:0.05:0.95 instead of using ``iou_threshold``.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(truths)} scenes")
    predictions = [list(p) for p in predictions]
    truths = [list(t) for t in truths]
    thresholds = np.linspace(0.5, 0.95, 10) if sweep else [iou_threshold]

    def averaged(band):
        pairs = [_ap_recall(predictions, truths, float(t), band) for t in thresholds]
        return float(np.mean([a for a, _ in pairs])), float(np.mean([r for _, r in pairs]))

    ap, ar = averaged(None)
    per_band = [averaged(b)[0] for b in range(len(BAND_NAMES))]
    return APResult(ap, ar, *per_band)
