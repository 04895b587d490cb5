"""Dual-decoupled prediction: global/patch fusion and generator/utilizer heads.

A :class:`DualModel` owns one shared backbone and two head pairs. The
*generator* pair is trained on labeled data only and produces pseudo-labels;
the *utilizer* pair is trained on pseudo-labeled data only. Each pair predicts
with a global head on the whole-instance view and a local head on every patch,
the patch probabilities being fused with a temperature softmax per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from d2lmat.errors import DimensionError, ValidationError
from d2lmat.losses import AslConfig, asl_prob_grad, bce_prob_grad
from d2lmat.ml_core import Backbone, LinearParams, Params, linear_backward, linear_forward, sigmoid

PAIRS = ("gen", "util")


# --- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    mode: str = "weak"
    sigma_weak: float = 0.05
    sigma_strong: float = 0.2
    dropout: float = 0.2

    def __post_init__(self):
        if self.mode not in ("weak", "strong", "none"):
            raise ValidationError(f"augmentation mode must be weak/strong/none, got {self.mode!r}")
        if self.sigma_weak < 0 or self.sigma_strong < 0:
            raise ValidationError("augmentation noise must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout rate must lie in [0, 1)")

    def with_mode(self, mode: str) -> "AugmentSpec":
        return AugmentSpec(mode, self.sigma_weak, self.sigma_strong, self.dropout)


def augment(features, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Feature-space stand-in for image augmentation.

    weak: additive Gaussian noise. strong: larger noise, then each coordinate
    zeroed independently with probability ``spec.dropout``.
    """
    x = np.asarray(features, dtype=np.float64)
    if spec.mode == "none":
        return x.copy()
    if spec.mode == "weak":
        if spec.sigma_weak == 0:
            return x.copy()
        return x + rng.normal(0.0, spec.sigma_weak, size=x.shape)
    out = x + rng.normal(0.0, spec.sigma_strong, size=x.shape) if spec.sigma_strong else x.copy()
    if spec.dropout > 0:
        out = out * (rng.random(x.shape) >= spec.dropout)
    return out


# --- spatially-weighted patch fusion -----------------------------------------


def patch_weights(patch_probs, alpha: float) -> np.ndarray:
    """Softmax over the patch axis (-2) of ``probs / alpha``, per class."""
    if not alpha > 0:
        raise ValidationError(f"temperature must be > 0, got {alpha}")
    p = np.asarray(patch_probs, dtype=np.float64)
    if p.ndim < 2:
        raise DimensionError("patch probabilities need a patch axis and a class axis")
    z = p / alpha
    z = z - z.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def aggregate_patches(patch_probs, alpha: float = 1.0) -> np.ndarray:
    """Fuse ``(..., n, K)`` patch probabilities into ``(..., K)``.

    ``out_k = sum_o softmax_o(p_ok / alpha) * p_ok``, independently per class.
    Patch values are sorted per class first so the floating-point result does
    not depend on patch order.
    """
    p = np.sort(np.asarray(patch_probs, dtype=np.float64), axis=-2)
    w = patch_weights(p, alpha)
    return (w * p).sum(axis=-2)


def aggregate_backward(patch_probs, alpha: float, grad_out) -> np.ndarray:
    """Gradient of :func:`aggregate_patches` w.r.t. the patch probabilities.

    ``d out / d p_o = w_o * (1 + (p_o - out) / alpha)``.
    """
    p = np.asarray(patch_probs, dtype=np.float64)
    w = patch_weights(p, alpha)
    out = (w * p).sum(axis=-2, keepdims=True)
    return np.expand_dims(grad_out, -2) * w * (1.0 + (p - out) / alpha)


# --- model -----------------------------------------------------------------


@dataclass(frozen=True)
class DualHeadPair:
    global_head: LinearParams
    local_head: LinearParams

    def __post_init__(self):
        if (self.global_head.d_in != self.local_head.d_in
                or self.global_head.d_out != self.local_head.d_out):
            raise DimensionError("global and local heads must share input/output dimensions")

    @property
    def n_classes(self) -> int:
        return self.global_head.d_out


@dataclass(frozen=True)
class DualModel:
    backbone: Backbone
    gen: DualHeadPair
    util: DualHeadPair

    @classmethod
    def init(cls, dim: int, n_classes: int, hidden: Optional[int], rng: np.random.Generator,
             head_scale: float = 0.01) -> "DualModel":
        """Fresh model. ``hidden=None`` (or 0) gives an identity backbone."""
        bb = Backbone(LinearParams.init(dim, hidden, rng) if hidden else None)
        d = bb.out_dim(dim)

        def pair():
            return DualHeadPair(LinearParams.init(d, n_classes, rng, head_scale),
                                LinearParams.init(d, n_classes, rng, head_scale))

        return cls(bb, pair(), pair())

    def pair(self, name: str) -> DualHeadPair:
        if name not in PAIRS:
            raise ValidationError(f"unknown head pair {name!r}")
        return self.gen if name == "gen" else self.util

    def params(self) -> Params:
        out: Params = {}
        if self.backbone.hidden is not None:
            out["backbone.W"] = self.backbone.hidden.weights
            out["backbone.b"] = self.backbone.hidden.bias
        for name in PAIRS:
            pr = self.pair(name)
            out[f"{name}.global.W"] = pr.global_head.weights
            out[f"{name}.global.b"] = pr.global_head.bias
            out[f"{name}.local.W"] = pr.local_head.weights
            out[f"{name}.local.b"] = pr.local_head.bias
        return out

    def with_params(self, params: Params) -> "DualModel":
        if self.params().keys() != params.keys():
            raise DimensionError("parameter names do not match the model")
        bb = (Backbone(LinearParams(params["backbone.W"], params["backbone.b"]))
              if "backbone.W" in params else Backbone(None))

        def pair(name):
            return DualHeadPair(LinearParams(params[f"{name}.global.W"], params[f"{name}.global.b"]),
                                LinearParams(params[f"{name}.local.W"], params[f"{name}.local.b"]))

        return DualModel(bb, pair("gen"), pair("util"))


@dataclass
class _Trace:
    xg: np.ndarray
    xp: np.ndarray
    fg: np.ndarray
    fp: np.ndarray
    pre_g: Optional[np.ndarray]
    pre_p: Optional[np.ndarray]


@dataclass
class PairOutput:
    p_global: np.ndarray
    p_local: np.ndarray
    p_final: np.ndarray
    patch_probs: np.ndarray


def _features(model: DualModel, xg, xp) -> _Trace:
    xg = np.asarray(xg, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    if xg.ndim != 2 or xp.ndim != 3 or xp.shape[0] != xg.shape[0] or xp.shape[2] != xg.shape[1]:
        raise DimensionError(f"global views {xg.shape} and patches {xp.shape} are inconsistent")
    fg, pre_g = model.backbone.forward(xg)
    fp, pre_p = model.backbone.forward(xp)
    return _Trace(xg, xp, fg, fp, pre_g, pre_p)


def _pair_forward(pair: DualHeadPair, tr: _Trace, alpha: float) -> PairOutput:
    pg = sigmoid(linear_forward(pair.global_head, tr.fg))
    pp = sigmoid(linear_forward(pair.local_head, tr.fp))
    pl = aggregate_patches(pp, alpha)
    return PairOutput(pg, pl, 0.5 * (pg + pl), pp)


def predict_batch(model: DualModel, global_views, patch_views, alpha: float = 1.0,
                  policy: str = "gen") -> np.ndarray:
    """Final probabilities for a batch.

    ``policy``: ``"gen"``, ``"util"`` or ``"mean"`` (average of both pairs).
    """
    tr = _features(model, global_views, patch_views)
    if policy == "mean":
        a = _pair_forward(model.gen, tr, alpha).p_final
        b = _pair_forward(model.util, tr, alpha).p_final
        return 0.5 * (a + b)
    return _pair_forward(model.pair(policy), tr, alpha).p_final


def dual_predict(instance, model: DualModel, alpha: float = 1.0,
                 pair: str = "gen") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p_global, p_local, p_final) for one patched instance."""
    xg = np.asarray(instance.global_features, dtype=np.float64)[None, :]
    xp = np.asarray(instance.patch_features, dtype=np.float64)[None, :, :]
    out = _pair_forward(model.pair(pair), _features(model, xg, xp), alpha)
    return out.p_global[0], out.p_local[0], out.p_final[0]


# --- losses with routed gradients ---------------------------------------------


LossCfg = Union[AslConfig, str]


def prob_loss(probs, targets, loss_cfg: LossCfg, reduction: str = "mean"):
    """Loss and gradient w.r.t. probabilities; ``loss_cfg`` is an AslConfig or ``"bce"``."""
    if isinstance(loss_cfg, AslConfig):
        return asl_prob_grad(probs, targets, loss_cfg, reduction)
    if loss_cfg == "bce":
        return bce_prob_grad(probs, targets, reduction)
    raise ValidationError(f"unknown loss {loss_cfg!r}")


def _pair_backward(model: DualModel, pair_name: str, tr: _Trace, out: PairOutput,
                   dp: np.ndarray, alpha: float, grads: Params) -> None:
    """Accumulate gradients of one pair's loss into ``grads`` (in place)."""
    pair = model.pair(pair_name)
    dpg = 0.5 * dp
    dpl = 0.5 * dp
    dpp = aggregate_backward(out.patch_probs, alpha, dpl)
    dzg = dpg * out.p_global * (1.0 - out.p_global)
    dzp = dpp * out.patch_probs * (1.0 - out.patch_probs)
    dfg, dwg, dbg = linear_backward(pair.global_head, tr.fg, dzg)
    dfp, dwl, dbl = linear_backward(pair.local_head, tr.fp, dzp)
    grads[f"{pair_name}.global.W"] += dwg
    grads[f"{pair_name}.global.b"] += dbg
    grads[f"{pair_name}.local.W"] += dwl
    grads[f"{pair_name}.local.b"] += dbl
    if not model.backbone.is_identity:
        w1, b1 = model.backbone.backward(tr.xg, tr.pre_g, dfg)
        w2, b2 = model.backbone.backward(tr.xp, tr.pre_p, dfp)
        grads["backbone.W"] += w1 + w2
        grads["backbone.b"] += b1 + b2


@dataclass
class D2LLosses:
    loss_l: float
    loss_u: float
    grads: Params
    grads_l: Params
    grads_u: Params

    @property
    def total(self) -> float:
        return self.loss_l + self.loss_u

    def __iter__(self):
        return iter((self.loss_l, self.loss_u, self.grads))


def d2l_losses(batch_l, batch_u, pseudo_labels, model: DualModel, alpha: float = 1.0,
               loss_cfg: LossCfg = AslConfig(), reduction: str = "mean") -> D2LLosses:
    """Labeled loss through the generator pair, unlabeled loss through the utilizer pair.

    ``batch_l``/``batch_u`` are ``Split``-like objects holding the views the
    loss should see (the caller applies strong augmentation). ``batch_l``
    needs labels; ``pseudo_labels`` must cover every row of ``batch_u``.
    The backbone receives gradient from both terms; each head pair only from
    its own term.
    """
    zeros = {k: np.zeros_like(v) for k, v in model.params().items()}
    grads_l = {k: v.copy() for k, v in zeros.items()}
    grads_u = {k: v.copy() for k, v in zeros.items()}

    loss_l = 0.0
    if batch_l is not None and len(batch_l.global_):
        if batch_l.labels is None:
            raise ValidationError("labeled batch has no labels")
        tr = _features(model, batch_l.global_, batch_l.patches)
        out = _pair_forward(model.gen, tr, alpha)
        loss_l, dp = prob_loss(out.p_final, batch_l.labels, loss_cfg, reduction)
        _pair_backward(model, "gen", tr, out, dp, alpha, grads_l)

    loss_u = 0.0
    if batch_u is not None and len(batch_u.global_):
        if pseudo_labels is None:
            raise ValidationError("unlabeled batch given without pseudo-labels")
        yhat = np.asarray(pseudo_labels)
        if yhat.shape[0] != len(batch_u.global_):
            raise DimensionError(f"{yhat.shape[0]} pseudo-label rows for {len(batch_u.global_)} instances")
        tr = _features(model, batch_u.global_, batch_u.patches)
        out = _pair_forward(model.util, tr, alpha)
        loss_u, dp = prob_loss(out.p_final, yhat, loss_cfg, reduction)
        _pair_backward(model, "util", tr, out, dp, alpha, grads_u)

    grads = {k: grads_l[k] + grads_u[k] for k in zeros}
    return D2LLosses(float(loss_l), float(loss_u), grads, grads_l, grads_u)
