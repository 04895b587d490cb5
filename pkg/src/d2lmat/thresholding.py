"""Class-wise pseudo-label thresholds.

``mat_search`` picks, for every class, the grid threshold that maximises a
pseudo-label quality metric on the labeled set. ``cap_thresholds``,
``fixed_thresholds`` and ``topk_pseudo_labels`` are the comparison strategies.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from d2lmat.errors import DimensionError, ValidationError
from d2lmat.metrics import ConfusionCounts, MetricKind, check_binary, class_metric


@dataclass(frozen=True)
class GridSpec:
    """Candidate thresholds ``{0, t, 2t, ..., 1}`` (last point clamped to 1)."""

    step: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.step <= 1.0):
            raise ValidationError(f"grid step must lie in (0, 1], got {self.step}")

    def points(self) -> np.ndarray:
        ratio = 1.0 / self.step
        n = int(round(ratio)) if abs(ratio - round(ratio)) < 1e-9 else int(math.floor(ratio))
        pts = np.round(np.arange(n + 1) * self.step, 12)
        pts = np.minimum(pts, 1.0)
        if pts[-1] < 1.0:
            pts = np.append(pts, 1.0)
        return pts


@dataclass(frozen=True)
class ThresholdVector:
    """Per-class thresholds plus a mask of classes that must never go positive.

    ``values`` holds the metric achieved on the labeled set when the vector came
    from a search; it is ``None`` otherwise.
    """

    tau: np.ndarray
    degenerate: np.ndarray = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.float64).ravel()
        if tau.size and (np.any(tau < 0.0) or np.any(tau > 1.0) or not np.all(np.isfinite(tau))):
            raise ValidationError("thresholds must lie in [0, 1]")
        deg = (np.zeros(tau.shape, dtype=bool) if self.degenerate is None
               else np.asarray(self.degenerate, dtype=bool).ravel())
        if deg.shape != tau.shape:
            raise DimensionError("degenerate mask length differs from thresholds")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "degenerate", deg)
        if self.values is not None:
            object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).ravel())

    def __len__(self):
        return self.tau.shape[0]

    def to_dict(self) -> dict:
        out = {
            "tau": [float(t) for t in self.tau],
            "degenerate": [int(k) for k in np.flatnonzero(self.degenerate)],
        }
        if self.values is not None:
            out["achieved"] = [float(v) for v in self.values]
        return out


GridLike = Union[GridSpec, Sequence[float], np.ndarray]


def _grid_points(grid: GridLike) -> np.ndarray:
    if isinstance(grid, GridSpec):
        return grid.points()
    pts = np.asarray(grid, dtype=np.float64).ravel()
    if pts.size == 0 or np.any(np.diff(pts) <= 0):
        raise ValidationError("explicit grid must be non-empty and strictly increasing")
    return pts


def _search_class(scores: np.ndarray, labels: np.ndarray, kind: MetricKind, pts: np.ndarray):
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0:
        return 1.0, True, 0.0
    # number of items with score >= tau
    tp = n_pos - np.searchsorted(pos, pts, side="left")
    fp = n_neg - np.searchsorted(neg, pts, side="left")
    counts = ConfusionCounts(tp=tp, fp=fp, tn=n_neg - fp, fn=n_pos - tp)
    vals = np.asarray(class_metric(counts, kind), dtype=np.float64)
    best = int(np.argmax(vals))  # first max -> smallest tau
    return float(pts[best]), False, float(vals[best])


def mat_search(scores_l, labels_l, kind: MetricKind = MetricKind(),
               grid: GridLike = GridSpec(), workers: int = 1) -> ThresholdVector:
    """Per-class threshold maximising ``kind`` over ``grid`` on labeled predictions.

    Pseudo-labels at a candidate ``tau`` are ``score >= tau``. Ties go to the
    smallest maximising ``tau``. Classes without labeled positives get ``tau = 1``
    and are flagged degenerate. ``workers > 1`` searches classes on a thread
    pool; the result is identical to the sequential one.
    """
    s = np.asarray(scores_l, dtype=np.float64)
    y = check_binary(labels_l)
    if s.ndim != 2 or s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} must be equal 2-D shapes")
    if s.shape[0] == 0:
        raise ValidationError("mat_search needs at least one labeled instance")
    pts = _grid_points(grid)
    K = s.shape[1]

    def one(k):
        return _search_class(s[:, k], y[:, k], kind, pts)

    if workers > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(K)))
    else:
        results = [one(k) for k in range(K)]
    tau, deg, vals = zip(*results) if results else ((), (), ())
    return ThresholdVector(np.array(tau, dtype=np.float64), np.array(deg, dtype=bool),
                           np.array(vals, dtype=np.float64))


def generate_pseudo_labels(scores_u, tau) -> np.ndarray:
    """``1`` where ``score >= tau_k``; degenerate classes are forced to ``0``."""
    tv = tau if isinstance(tau, ThresholdVector) else ThresholdVector(tau)
    s = np.asarray(scores_u, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != len(tv):
        raise DimensionError(f"scores have shape {s.shape}, thresholds have length {len(tv)}")
    out = (s >= tv.tau[None, :]).astype(np.int64)
    out[:, tv.degenerate] = 0
    return out


def cap_thresholds(scores_u, labels_l) -> ThresholdVector:
    """Thresholds that reproduce the labeled class proportions on unlabeled data.

    With ``rho_k`` the labeled positive rate, ``s_k = ceil(rho_k * M)`` and
    ``tau_k`` is the ``s_k``-th largest unlabeled score of class ``k``.
    ``s_k`` is computed in integer arithmetic.
    """
    s = np.asarray(scores_u, dtype=np.float64)
    y = check_binary(labels_l)
    if s.ndim != 2 or y.ndim != 2 or s.shape[1] != y.shape[1]:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} disagree on class count")
    M, N = s.shape[0], y.shape[0]
    if M == 0 or N == 0:
        raise ValidationError("cap_thresholds needs non-empty labeled and unlabeled sets")
    pos = y.sum(axis=0)
    K = s.shape[1]
    tau = np.ones(K)
    deg = np.zeros(K, dtype=bool)
    for k in range(K):
        count = -((-int(pos[k]) * M) // N)  # ceil(pos * M / N)
        if count == 0:
            deg[k] = True
            continue
        col = np.sort(s[:, k])[::-1]
        tau[k] = col[count - 1]
    return ThresholdVector(tau, deg)


def fixed_thresholds(tau0: float, K: int) -> ThresholdVector:
    if not 0.0 <= tau0 <= 1.0:
        raise ValidationError(f"fixed threshold must lie in [0, 1], got {tau0}")
    return ThresholdVector(np.full(int(K), float(tau0)))


def topk_pseudo_labels(scores_u, k: int) -> np.ndarray:
    """Mark the ``k`` highest-scoring classes of each row (ties -> lower class index)."""
    s = np.asarray(scores_u, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got {s.shape}")
    K = s.shape[1]
    if not 1 <= k <= K:
        raise ValidationError(f"k must lie in [1, {K}], got {k}")
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    out = np.zeros(s.shape, dtype=np.int64)
    np.put_along_axis(out, order, 1, axis=1)
    return out


def snap_to_grid(tau, grid: GridLike = GridSpec()) -> np.ndarray:
    """Round each threshold up to the nearest grid point (pseudo-labels unchanged when no score lies between)."""
    pts = _grid_points(grid)
    t = np.asarray(tau, dtype=np.float64)
    idx = np.minimum(np.searchsorted(pts, t, side="left"), pts.size - 1)
    return pts[idx]
