"""Segmentation metrics: IoU and Precision@X.

Precision@X counts a sample only when its IoU is strictly greater than the
threshold.  An empty union (both masks empty) counts as IoU 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(pred, gt).sum()
    return float(inter) / float(union)


@dataclass
class EvalReport:
    iou: float
    prec: dict                      # threshold -> fraction with IoU > threshold
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            **{f"pr{int(t * 100)}": self.prec[t] for t in THRESHOLDS},
        }


def build_report(records: list, iou_agg: str = "mean") -> EvalReport:
    """records: list of dicts with keys iou, intersection, union."""
    if not records:
        raise InputError("cannot evaluate an empty split")
    ious = np.array([r["iou"] for r in records], dtype=np.float64)
    if iou_agg == "mean":
        agg = float(ious.mean())
    else:   # overall: pooled pixel counts
        inter = sum(r["intersection"] for r in records)
        union = sum(r["union"] for r in records)
        agg = 1.0 if union == 0 else inter / union
    prec = {t: float((ious > t).mean()) for t in THRESHOLDS}
    return EvalReport(iou=agg, prec=prec, per_sample=records)
