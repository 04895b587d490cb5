"""Slow reference implementations used to cross-check the production code.

Nothing here calls into ``metrics``/``thresholding``/``losses`` computations;
only their plain value types are shared. Loops are literal on purpose.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from d2lmat.errors import DimensionError, ValidationError
from d2lmat.metrics import MetricKind
from d2lmat.thresholding import GridSpec, ThresholdVector


def _div(a, b):
    return a / b if b != 0 else 0.0


def _metric(tp, fp, fn, kind: MetricKind) -> float:
    p = _div(float(tp), float(tp + fp))
    r = _div(float(tp), float(tp + fn))
    if kind.name == "precision":
        return p
    if kind.name == "recall":
        return r
    b2 = kind.beta * kind.beta
    w = kind.beta if kind.printed_fbeta else b2
    return _div((1.0 + b2) * p * r, w * p + r)


def brute_force_thresholds(scores, labels, kind: MetricKind = MetricKind(),
                           grid=GridSpec()) -> ThresholdVector:
    """Exhaustive class x grid search, recounting the confusion matrix at every point."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise DimensionError("scores and labels must be equal 2-D shapes")
    if s.shape[0] == 0:
        raise ValidationError("brute_force_thresholds needs at least one labeled instance")
    pts = grid.points() if isinstance(grid, GridSpec) else list(grid)
    N, K = s.shape
    taus, degs, vals = [], [], []
    for k in range(K):
        if not any(y[i, k] == 1 for i in range(N)):
            taus.append(1.0)
            degs.append(True)
            vals.append(0.0)
            continue
        best_tau, best_val = None, -1.0
        for tau in pts:
            tp = fp = fn = 0
            for i in range(N):
                pred = 1 if s[i, k] >= tau else 0
                if pred == 1 and y[i, k] == 1:
                    tp += 1
                elif pred == 1:
                    fp += 1
                elif y[i, k] == 1:
                    fn += 1
            v = _metric(tp, fp, fn, kind)
            if v > best_val:
                best_tau, best_val = float(tau), v
        taus.append(best_tau)
        degs.append(False)
        vals.append(best_val)
    return ThresholdVector(np.array(taus), np.array(degs, dtype=bool), np.array(vals))


def finite_diff_grad(loss_eval: Callable[[np.ndarray], float], point, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise ValidationError("eps must be > 0")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = float(loss_eval(x))
        flat[j] = orig - eps
        lo = float(loss_eval(x))
        flat[j] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValidationError(f"non-finite loss at probe coordinate {j}")
        g[j] = (hi - lo) / (2.0 * eps)
    return grad


def naive_ap(scores, labels) -> float:
    """AP by counting, for each positive, how many items outrank it."""
    s = [float(v) for v in np.ravel(scores)]
    y = [int(v) for v in np.ravel(labels)]
    n = len(s)

    def rank(i):
        r = 1
        for j in range(n):
            if s[j] > s[i] or (s[j] == s[i] and j < i):
                r += 1
        return r

    positives = [i for i in range(n) if y[i] == 1]
    if not positives:
        return 0.0
    ranks = {i: rank(i) for i in positives}
    total = 0.0
    for i in positives:
        hits = sum(1 for j in positives if ranks[j] <= ranks[i])
        total += hits / ranks[i]
    return total / len(positives)


def naive_metrics(scores, labels, threshold: float = 0.5, preds=None,
                  kinds: Tuple[MetricKind, ...] = (MetricKind("fbeta", 0.5),)) -> Dict[str, object]:
    """mAP, CF1/OF1 and per-class P/R/F-beta written straight from their definitions."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    N, K = s.shape
    if preds is None:
        preds = [[1 if s[i, k] >= threshold else 0 for k in range(K)] for i in range(N)]
    preds = np.asarray(preds)

    aps: List[float] = []
    used: List[float] = []
    precision: List[float] = []
    recall: List[float] = []
    per_class: Dict[str, List[float]] = {kind.label(): [] for kind in kinds}
    tps, fps, fns = [], [], []
    for k in range(K):
        col_s = [s[i, k] for i in range(N)]
        col_y = [int(y[i, k]) for i in range(N)]
        ap = naive_ap(col_s, col_y)
        aps.append(ap)
        if sum(col_y) > 0:
            used.append(ap)
        tp = sum(1 for i in range(N) if preds[i, k] == 1 and y[i, k] == 1)
        fp = sum(1 for i in range(N) if preds[i, k] == 1 and y[i, k] == 0)
        fn = sum(1 for i in range(N) if preds[i, k] == 0 and y[i, k] == 1)
        tps.append(tp)
        fps.append(fp)
        fns.append(fn)
        precision.append(_div(float(tp), float(tp + fp)))
        recall.append(_div(float(tp), float(tp + fn)))
        for kind in kinds:
            per_class[kind.label()].append(_metric(tp, fp, fn, kind))

    cp = sum(precision) / K
    cr = sum(recall) / K
    op = _div(float(sum(tps)), float(sum(tps) + sum(fps)))
    orc = _div(float(sum(tps)), float(sum(tps) + sum(fns)))
    return {
        "mAP": sum(used) / len(used) if used else 0.0,
        "AP": aps,
        "CP": cp,
        "CR": cr,
        "CF1": _div(2.0 * cp * cr, cp + cr),
        "OP": op,
        "OR": orc,
        "OF1": _div(2.0 * op * orc, op + orc),
        "per_class": {"precision": precision, "recall": recall, **per_class},
    }
