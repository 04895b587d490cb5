"""Asymmetric loss and binary cross-entropy with analytic gradients.

Both losses take probabilities and return ``(loss, grad)`` where ``grad`` is
taken with respect to the logits behind those probabilities. The ``*_prob_grad``
variants return the gradient with respect to the probabilities themselves,
which is what the patch-fusion path needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from d2lmat.errors import DimensionError, ValidationError

EPS_CLAMP = 1e-7


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def __post_init__(self):
        vals = (self.gamma_pos, self.gamma_neg, self.margin)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("AslConfig entries must be finite")
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValidationError("focusing exponents must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ValidationError(f"margin must lie in [0, 1), got {self.margin}")


def _check(probs, targets) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"probs {p.shape} and targets {y.shape} differ in shape")
    return p, y


def _reduce(elem: np.ndarray, grad: np.ndarray, reduction: str):
    if reduction == "sum":
        return float(elem.sum()), grad
    if reduction == "mean":
        # mean over instances, sum over classes
        n = max(elem.shape[0], 1) if elem.ndim >= 1 else 1
        return float(elem.sum()) / n, grad / n
    if reduction == "none":
        return elem, grad
    raise ValidationError(f"unknown reduction {reduction!r}")


def asl_elementwise(probs, targets, cfg: AslConfig = AslConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Per-element ASL values and their derivative with respect to ``probs``.

    Positive term ``-(1-p)^g+ log p``; negative term ``-(p_m)^g- log(1-p_m)``
    with ``p_m = max(p - m, 0)``. Probabilities are clamped to
    ``[EPS_CLAMP, 1 - EPS_CLAMP]``; the derivative is zero where the clamp is
    active and at/below the margin kink.
    """
    p_raw, y = _check(probs, targets)
    p = np.clip(p_raw, EPS_CLAMP, 1.0 - EPS_CLAMP)
    live = (p_raw > EPS_CLAMP) & (p_raw < 1.0 - EPS_CLAMP)

    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.margin

    one_m_p = 1.0 - p
    log_p = np.log(p)
    pos_w = one_m_p ** gp
    loss_pos = -pos_w * log_p
    if gp > 0:
        d_pos = gp * one_m_p ** (gp - 1.0) * log_p - pos_w / p
    else:
        d_pos = -1.0 / p

    pm = np.maximum(p - m, 0.0)
    above = p > m
    log_1m = np.log1p(-pm)
    neg_w = pm ** gn
    loss_neg = -neg_w * log_1m
    with np.errstate(divide="ignore", invalid="ignore"):
        if gn > 0:
            dw = np.where(above, gn * pm ** (gn - 1.0), 0.0)
        else:
            dw = np.zeros_like(pm)
    d_neg = -(dw * log_1m) + neg_w / (1.0 - pm)
    d_neg = np.where(above, d_neg, 0.0)

    elem = y * loss_pos + (1.0 - y) * loss_neg
    dp = (y * d_pos + (1.0 - y) * d_neg) * live
    return elem, dp


def asl_prob_grad(probs, targets, cfg: AslConfig = AslConfig(), reduction: str = "sum"):
    """ASL loss and gradient with respect to ``probs``."""
    elem, dp = asl_elementwise(probs, targets, cfg)
    return _reduce(elem, dp, reduction)


def asl_loss(probs, targets, cfg: AslConfig = AslConfig(), reduction: str = "sum"):
    """ASL loss and gradient with respect to the logits (``p = sigmoid(z)``)."""
    p = np.asarray(probs, dtype=np.float64)
    elem, dp = asl_elementwise(p, targets, cfg)
    return _reduce(elem, dp * p * (1.0 - p), reduction)


def bce_elementwise(probs, targets) -> Tuple[np.ndarray, np.ndarray]:
    p_raw, y = _check(probs, targets)
    p = np.clip(p_raw, EPS_CLAMP, 1.0 - EPS_CLAMP)
    live = (p_raw > EPS_CLAMP) & (p_raw < 1.0 - EPS_CLAMP)
    elem = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dp = (-y / p + (1.0 - y) / (1.0 - p)) * live
    return elem, dp


def bce_prob_grad(probs, targets, reduction: str = "sum"):
    elem, dp = bce_elementwise(probs, targets)
    return _reduce(elem, dp, reduction)


def bce_loss(probs, targets, reduction: str = "sum"):
    """BCE loss and its logit gradient ``p - y`` (zero where the clamp is active)."""
    p_raw, y = _check(probs, targets)
    elem, _ = bce_elementwise(p_raw, y)
    live = (p_raw > EPS_CLAMP) & (p_raw < 1.0 - EPS_CLAMP)
    return _reduce(elem, (p_raw - y) * live, reduction)
