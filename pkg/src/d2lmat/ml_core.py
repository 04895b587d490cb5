"""Dense numeric primitives: linear layers, a stable sigmoid, AdamW, EMA.

Everything here is a pure function over numpy arrays. Parameter sets are plain
``dict[str, np.ndarray]`` so the optimizer and the EMA can walk them without
knowing the model structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from d2lmat.errors import DimensionError, ValidationError

Params = Dict[str, np.ndarray]


def as_matrix(data, name="matrix") -> np.ndarray:
    """Coerce ``data`` to a finite float64 2-D array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LinearParams:
    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise DimensionError(f"weights {w.shape} and bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("LinearParams must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: Optional[float] = None):
        """He-style normal init; bias starts at zero."""
        if scale is None:
            scale = math.sqrt(2.0 / max(d_in, 1))
        return cls(rng.normal(0.0, scale, size=(d_in, d_out)), np.zeros(d_out))


def linear_forward(params: LinearParams, features) -> np.ndarray:
    """``features @ W + b``. Accepts any leading batch shape on ``features``."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise DimensionError(
            f"features have {x.shape[-1]} columns, layer expects {params.d_in}"
        )
    return x @ params.weights + params.bias


def linear_backward(params: LinearParams, features, grad_out) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a linear layer: (d_features, d_weights, d_bias).

    Leading batch dimensions of ``features``/``grad_out`` are flattened.
    """
    x = np.asarray(features, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    x2 = x.reshape(-1, params.d_in)
    g2 = g.reshape(-1, params.d_out)
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = g @ params.weights.T
    return dx, dw, db


def sigmoid(logits) -> np.ndarray:
    """Logistic function, split on sign so ``exp`` never overflows."""
    z = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class Backbone:
    """Shared feature extractor: identity, or one ReLU hidden layer."""

    hidden: Optional[LinearParams] = None

    @property
    def is_identity(self) -> bool:
        return self.hidden is None

    def out_dim(self, d_in: int) -> int:
        return d_in if self.hidden is None else self.hidden.d_out

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Returns (features, pre-activation cache)."""
        if self.hidden is None:
            return np.asarray(x, dtype=np.float64), None
        pre = linear_forward(self.hidden, x)
        return relu(pre), pre

    def backward(self, x, pre, grad_out) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """Weight/bias gradients of the hidden layer (``(None, None)`` for identity)."""
        if self.hidden is None:
            return None, None
        g = np.where(pre > 0.0, grad_out, 0.0)
        _, dw, db = linear_backward(self.hidden, x, g)
        return dw, db


# --- optimizer -----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kwargs) -> "OptimizerState":
        m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        return cls(m=m, v=v, **kwargs)


def _check_same_shapes(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], what: str):
    if a.keys() != b.keys():
        raise DimensionError(f"{what}: parameter names differ ({sorted(a)} vs {sorted(b)})")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise DimensionError(f"{what}: shape mismatch for {k!r}: {np.shape(a[k])} vs {np.shape(b[k])}")


def adamw_step(state: OptimizerState, params: Params, grads: Params,
               lr: Optional[float] = None, frozen: Iterable[str] = ()) -> Tuple[OptimizerState, Params]:
    """One AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``. ``lr`` overrides
    the state's learning rate for this step (used by schedules). Keys in
    ``frozen`` keep their value and moments, weight decay included. Inputs
    are not mutated.
    """
    frozen = set(frozen)
    _check_same_shapes(params, grads, "adamw_step grads")
    _check_same_shapes(params, state.m, "adamw_step state")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        if k in frozen:
            new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
            continue
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[k] = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
        new_m[k] = m
        new_v[k] = v
    return replace(state, m=new_m, v=new_v, step=t), new_p


def one_cycle_lr(step: int, total_steps: int, peak_lr: float, pct_start: float = 0.2,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Linear ramp to ``peak_lr`` then cosine decay to ``peak_lr / final_div_factor``.

    ``step`` is 0-based. Mirrors the usual one-cycle defaults.
    """
    if total_steps <= 1:
        return peak_lr
    start = peak_lr / div_factor
    end = peak_lr / final_div_factor
    up = max(1, int(round(pct_start * total_steps)))
    if step < up:
        return start + (peak_lr - start) * step / up
    frac = min(1.0, (step - up) / max(1, total_steps - 1 - up))
    return end + (peak_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# --- EMA -----------------------------------------------------------------


@dataclass(frozen=True)
class EmaState:
    shadow: Params
    decay: float = 0.9997
    num_updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValidationError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], decay: float = 0.9997) -> "EmaState":
        return cls(shadow={k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()},
                   decay=decay)


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray],
               decay: Optional[float] = None) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params`` elementwise.

    ``decay`` overrides ``ema.decay`` for this call only.
    """
    _check_same_shapes(ema.shadow, params, "ema_update")
    d = ema.decay if decay is None else decay
    shadow = {k: d * s + (1.0 - d) * np.asarray(params[k], dtype=np.float64)
              for k, s in ema.shadow.items()}
    return replace(ema, shadow=shadow, num_updates=ema.num_updates + 1)


def warmup_decay(decay: float, num_updates: int) -> float:
    """Decay capped by ``(1 + n) / (10 + n)`` so short runs still track the weights."""
    return min(decay, (1.0 + num_updates) / (10.0 + num_updates))
