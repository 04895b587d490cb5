"""Multi-label evaluation: confusion counts, P/R/F-beta, AP/mAP, CF1/OF1.

Every ratio uses the convention 0/0 -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from d2lmat.errors import DimensionError, ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def n_instances(self) -> np.ndarray:
        return self.tp + self.fp + self.tn + self.fn

    def __getitem__(self, k) -> "ConfusionCounts":
        return ConfusionCounts(self.tp[k], self.fp[k], self.tn[k], self.fn[k])


@dataclass(frozen=True)
class MetricKind:
    """Per-class pseudo-label quality metric.

    ``name`` is one of ``"fbeta"``, ``"precision"``, ``"recall"``.
    ``printed_fbeta`` switches F-beta to the ``beta * P + R`` denominator
    variant for ablation; the default is the standard ``beta**2 * P + R``.
    """

    name: str = "fbeta"
    beta: float = 0.5
    printed_fbeta: bool = False

    def __post_init__(self):
        if self.name not in ("fbeta", "precision", "recall"):
            raise ValidationError(f"unknown metric {self.name!r}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")

    @classmethod
    def fbeta(cls, beta: float = 0.5) -> "MetricKind":
        return cls("fbeta", beta)

    @classmethod
    def precision(cls) -> "MetricKind":
        return cls("precision")

    @classmethod
    def recall(cls) -> "MetricKind":
        return cls("recall")

    def label(self) -> str:
        return f"fbeta{self.beta:g}" if self.name == "fbeta" else self.name


def check_binary(mat, name="labels") -> np.ndarray:
    arr = np.asarray(mat)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{name} must be binary (0/1)")
    return arr.astype(np.int64)


def _binary_pair(pred, truth):
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(f"pred {p.shape} and truth {t.shape} differ in shape")
    if p.ndim == 1:
        p = p[:, None]
        t = t[:, None]
    return check_binary(p, "pred"), check_binary(t, "truth")


def confusion_counts(pred, truth) -> ConfusionCounts:
    """Per-class confusion counts. 1-D inputs are treated as a single class."""
    p, t = _binary_pair(pred, truth)
    tp = np.sum(p & t, axis=0)
    fp = np.sum(p & (1 - t), axis=0)
    fn = np.sum((1 - p) & t, axis=0)
    tn = np.sum((1 - p) & (1 - t), axis=0)
    return ConfusionCounts(tp, fp, tn, fn)


def safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out if out.ndim else float(out)


def fbeta_from_pr(precision, recall, beta: float, printed: bool = False):
    b2 = beta * beta
    den_w = beta if printed else b2
    return safe_div((1.0 + b2) * precision * recall, den_w * precision + recall)


def class_metric(counts: ConfusionCounts, kind: MetricKind):
    """Precision, recall or F-beta from confusion counts (scalar or per class)."""
    tp = np.asarray(counts.tp, dtype=np.float64)
    precision = safe_div(tp, tp + counts.fp)
    recall = safe_div(tp, tp + counts.fn)
    if kind.name == "precision":
        return precision
    if kind.name == "recall":
        return recall
    return fbeta_from_pr(precision, recall, kind.beta, kind.printed_fbeta)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision@rank over the positive items.

    Ranking is by descending score with ties broken by ascending index.
    Returns 0.0 when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = check_binary(np.asarray(labels).ravel())
    if s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hit = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hit.sum() / n_pos)


def per_class_ap(scores, labels):
    """Return ``(ap, has_positive)`` arrays over columns."""
    s = np.asarray(scores, dtype=np.float64)
    y = check_binary(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} must be equal 2-D shapes")
    ap = np.array([average_precision(s[:, k], y[:, k]) for k in range(s.shape[1])])
    return ap, y.sum(axis=0) > 0


def mean_average_precision(scores, labels) -> float:
    """Mean AP over classes that have at least one positive."""
    ap, valid = per_class_ap(scores, labels)
    if not valid.any():
        raise ValidationError("mAP undefined: no class has a positive label")
    return float(ap[valid].mean())


def cf1_of1(pred, truth) -> Dict[str, float]:
    """Per-class-averaged (C*) and overall (O*) precision, recall and F1."""
    c = confusion_counts(pred, truth)
    tp = c.tp.astype(np.float64)
    cp = float(np.mean(safe_div(tp, tp + c.fp)))
    cr = float(np.mean(safe_div(tp, tp + c.fn)))
    op = safe_div(tp.sum(), (tp + c.fp).sum())
    orc = safe_div(tp.sum(), (tp + c.fn).sum())
    return {
        "CF1": float(safe_div(2.0 * cp * cr, cp + cr)),
        "OF1": float(safe_div(2.0 * op * orc, op + orc)),
        "CP": cp,
        "CR": cr,
        "OP": float(op),
        "OR": float(orc),
    }


def metric_bundle(scores, labels, threshold: float = 0.5,
                  pred: Optional[np.ndarray] = None) -> Dict[str, object]:
    """mAP plus CF1/OF1 at ``threshold`` (or on ``pred`` if given), with degenerate flags."""
    s = np.asarray(scores, dtype=np.float64)
    y = check_binary(labels)
    ap, valid = per_class_ap(s, y)
    if pred is None:
        pred = (s >= threshold).astype(np.int64)
    out: Dict[str, object] = {
        "mAP": float(ap[valid].mean()) if valid.any() else 0.0,
        "AP": [float(a) for a in ap],
        "degenerate_classes": [int(k) for k in np.flatnonzero(~valid)],
    }
    out.update(cf1_of1(pred, y))
    return out
