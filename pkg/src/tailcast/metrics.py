"""Imbalance-aware evaluation: confusion counts, threshold metrics,
ROC/AUC and the precision-recall curve with average precision.

Zero-denominator conventions: precision is 0 when nothing is predicted
positive, recall is 0 without positives, F1 is 0 when precision and
recall are both 0. Under these rules the all-negative predictor scores
exactly 0 on precision, recall and F1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


class LengthMismatch(DataError):
    pass


class SingleClassInput(DataError):
    pass


class NoPositives(DataError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    fpr: float
    tpr: float
    precision: float
    recall: float


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    tnr: float
    f1: float
    auc_roc: float
    average_precision: float
    threshold: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        doc = json.loads(text)
        doc["counts"] = ConfusionCounts(**doc["counts"])
        return MetricsReport(**doc)


def _check(y, scores):
    y = np.asarray(y).reshape(-1)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if y.size != scores.size:
        raise LengthMismatch(f"{y.size} labels vs {scores.size} scores")
    if y.size == 0:
        raise DataError("empty input")
    return y.astype(np.int64), scores


def confusion(y, y_hat, threshold: float = 0.5) -> ConfusionCounts:
    """Hard counts at a threshold; prediction positive iff score >= it."""
    y, scores = _check(y, y_hat)
    pred = scores >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)), tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)))


def scalar_metrics(counts: ConfusionCounts) -> dict[str, float]:
    if counts.total == 0:
        raise DataError("empty confusion counts")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return {
        "accuracy": (tp + tn) / counts.total,
        "balanced_accuracy": (recall + tnr) / 2.0,
        "precision": precision,
        "recall": recall,
        "tnr": tnr,
        "f1": f1,
    }


def roc_auc(y, scores) -> tuple[list[CurvePoint], float]:
    """ROC over all distinct score thresholds with trapezoidal area.

    Equal scores are grouped into one threshold step, which makes the
    trapezoidal area equal the tie-adjusted pair-counting probability.
    """
    y, scores = _check(y, scores)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("need both classes for a ROC curve")

    order = np.argsort(-scores, kind="stable")
    ys, ss = y[order], scores[order]
    points = [CurvePoint(threshold=np.inf, fpr=0.0, tpr=0.0,
                         precision=0.0, recall=0.0)]
    tp = fp = 0
    auc = 0.0
    prev_fpr = prev_tpr = 0.0
    i = 0
    while i < ys.size:
        j = i
        while j < ys.size and ss[j] == ss[i]:
            j += 1
        tp += int(np.sum(ys[i:j] == 1))
        fp += (j - i) - int(np.sum(ys[i:j] == 1))
        tpr, fpr = tp / n_pos, fp / n_neg
        precision = tp / (tp + fp) if tp + fp else 0.0
        points.append(CurvePoint(threshold=float(ss[i]), fpr=fpr, tpr=tpr,
                                 precision=precision, recall=tpr))
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_fpr, prev_tpr = fpr, tpr
        i = j
    return points, auc


def pr_curve_ap(y, scores) -> tuple[list[CurvePoint], float]:
    """Precision-recall curve with step-wise average precision:
    AP = sum over descending thresholds of (R_k - R_{k-1}) * P_k."""
    y, scores = _check(y, scores)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")

    order = np.argsort(-scores, kind="stable")
    ys, ss = y[order], scores[order]
    points = []
    tp = fp = 0
    ap = 0.0
    prev_recall = 0.0
    i = 0
    while i < ys.size:
        j = i
        while j < ys.size and ss[j] == ss[i]:
            j += 1
        tp += int(np.sum(ys[i:j] == 1))
        fp += (j - i) - int(np.sum(ys[i:j] == 1))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        n_neg = y.size - n_pos
        points.append(CurvePoint(
            threshold=float(ss[i]),
            fpr=fp / n_neg if n_neg else 0.0,
            tpr=recall, precision=precision, recall=recall))
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return points, ap


def evaluate(y, scores, threshold: float = 0.5) -> MetricsReport:
    counts = confusion(y, scores, threshold)
    scalars = scalar_metrics(counts)
    _, auc = roc_auc(y, scores)
    _, ap = pr_curve_ap(y, scores)
    return MetricsReport(counts=counts, auc_roc=auc, average_precision=ap,
                         threshold=threshold, **scalars)


def write_curve_csv(path: str | Path, points: list[CurvePoint]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr", "precision", "recall"])
        for p in points:
            writer.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr),
                             repr(p.precision), repr(p.recall)])
