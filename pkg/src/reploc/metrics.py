"""Frame-level evaluation: recall, precision, F1, and overlap (Jaccard).

The positive class is "repetitive".  Overlap is the Jaccard index of the
predicted and ground-truth repetitive frame sets, tp / (tp + fp + fn),
which always satisfies O <= min(P, R) and F1 = 2O / (1 + O).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import SegmentAnnotation
from .errors import ConfigError, ShapeError


@dataclass
class EvalReport:
    recall: float
    precision: float
    f1: float
    overlap: float
    tp: int
    fp: int
    fn: int
    tn: int

    def tsv(self) -> str:
        return "\t".join(
            [
                f"{100 * self.recall:.1f}",
                f"{100 * self.precision:.1f}",
                f"{100 * self.f1:.1f}",
                f"{100 * self.overlap:.1f}",
                str(self.tp),
                str(self.fp),
                str(self.fn),
                str(self.tn),
            ]
        )


def evaluate_labels(pred: np.ndarray, truth: np.ndarray) -> EvalReport:
    """Confusion counts and metrics from two boolean label arrays."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"label lengths differ: {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    if tp + fp == 0:
        precision = 1.0 if tp + fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0 if tp + fp == 0 else 0.0
    else:
        recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    overlap = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return EvalReport(recall, precision, f1, overlap, tp, fp, fn, tn)


def evaluate(pred_labels: np.ndarray, gt: SegmentAnnotation, n: int) -> EvalReport:
    """Score per-frame predictions against a segment annotation."""
    pred = np.asarray(pred_labels, dtype=bool)
    if pred.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {pred.shape}")
    return evaluate_labels(pred, gt.frame_labels(n))


def aggregate(reports: list[EvalReport]) -> EvalReport:
    """Per-video macro average of each metric; confusion counts summed."""
    if not reports:
        raise ConfigError("cannot aggregate an empty report list")
    return EvalReport(
        recall=float(np.mean([r.recall for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        overlap=float(np.mean([r.overlap for r in reports])),
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        tn=sum(r.tn for r in reports),
    )
