"""Warm-up, per-epoch threshold re-estimation and joint dual-head training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from d2lmat.d2l import AugmentSpec, DualModel, augment, d2l_losses, predict_batch
from d2lmat.data import Split, SsmllDataset, crop_split
from d2lmat.errors import ConfigError, ValidationError
from d2lmat.losses import AslConfig
from d2lmat.metrics import MetricKind, cf1_of1, metric_bundle
from d2lmat.ml_core import EmaState, OptimizerState, adamw_step, ema_update, one_cycle_lr, warmup_decay
from d2lmat.thresholding import (
    GridSpec,
    ThresholdVector,
    cap_thresholds,
    fixed_thresholds,
    generate_pseudo_labels,
    mat_search,
    topk_pseudo_labels,
)

log = logging.getLogger(__name__)

STRATEGIES = ("mat", "cap", "fixed", "topk", "supervised")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40  # total, warm-up included
    warmup_epochs: int = 12
    batch_size: int = 16
    unlabeled_ratio_cap: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    schedule: str = "onecycle"
    ema_decay: float = 0.9997
    ema_warmup: bool = True
    metric: str = "fbeta"
    beta: float = 0.5
    printed_fbeta: bool = False
    alpha: float = 1.0
    n_patches: Optional[int] = None  # None -> whatever the data stores
    hidden: Optional[int] = 64
    grid_step: float = 0.01
    strategy: str = "mat"
    fixed_tau: float = 0.5
    topk: int = 2
    loss: str = "asl"
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    sigma_weak: float = 0.05
    sigma_strong: float = 0.2
    dropout: float = 0.2
    threshold_source: str = "ema"
    eval_policy: str = "mean"
    eval_threshold: float = 0.5
    patience: int = 10
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        def bad(name, msg):
            raise ConfigError(msg, f"train.{name}")

        for name in ("epochs", "batch_size", "unlabeled_ratio_cap", "patience", "workers", "topk"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be a positive integer")
        if not 0 <= self.warmup_epochs <= self.epochs:
            bad("warmup_epochs", "must lie in [0, epochs]")
        if self.lr <= 0:
            bad("lr", "must be > 0")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            bad("ema_decay", "must lie in [0, 1)")
        if self.metric not in ("fbeta", "precision", "recall"):
            bad("metric", "must be fbeta, precision or recall")
        if self.beta <= 0:
            bad("beta", "must be > 0")
        if self.alpha <= 0:
            bad("alpha", "must be > 0")
        if self.n_patches is not None and self.n_patches < 1:
            bad("n_patches", "must be >= 1")
        if self.hidden is not None and self.hidden < 0:
            bad("hidden", "must be >= 0")
        if not 0 < self.grid_step <= 1:
            bad("grid_step", "must lie in (0, 1]")
        if self.strategy not in STRATEGIES:
            bad("strategy", f"must be one of {STRATEGIES}")
        if not 0 <= self.fixed_tau <= 1:
            bad("fixed_tau", "must lie in [0, 1]")
        if self.loss not in ("asl", "bce"):
            bad("loss", "must be asl or bce")
        if self.schedule not in ("onecycle", "constant"):
            bad("schedule", "must be onecycle or constant")
        if self.threshold_source not in ("ema", "raw"):
            bad("threshold_source", "must be ema or raw")
        if self.eval_policy not in ("mean", "gen", "util"):
            bad("eval_policy", "must be mean, gen or util")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must lie in [0, 1)")
        try:
            AslConfig(self.gamma_pos, self.gamma_neg, self.margin)
        except ValidationError as exc:
            bad("margin", str(exc))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}", "train")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), "train") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def metric_kind(self) -> MetricKind:
        return MetricKind(self.metric, self.beta, self.printed_fbeta)

    def loss_cfg(self):
        return AslConfig(self.gamma_pos, self.gamma_neg, self.margin) if self.loss == "asl" else "bce"

    def aug(self, mode: str) -> AugmentSpec:
        return AugmentSpec(mode, self.sigma_weak, self.sigma_strong, self.dropout)

    @property
    def effective_eval_policy(self) -> str:
        # utilizer heads never train without unlabeled updates
        return "gen" if self.strategy == "supervised" else self.eval_policy


@dataclass
class TrainState:
    model: DualModel
    opt: OptimizerState
    ema: EmaState
    rng: np.random.Generator
    step: int = 0
    total_steps: int = 1
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    best_monitor: float = -math.inf
    best_epoch: int = -1
    best_params: Optional[Dict[str, np.ndarray]] = None
    stale: int = 0
    stopped_early: bool = False

    def ema_model(self) -> DualModel:
        return self.model.with_params(self.ema.shadow)


def _augmented(split: Split, spec: AugmentSpec, rng) -> Split:
    return Split(augment(split.global_, spec, rng), augment(split.patches, spec, rng), split.labels)


def _batches(n: int, size: int, rng) -> List[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def unlabeled_batch_size(cfg: TrainConfig, n_lab: int, n_unl: int) -> int:
    ratio = math.ceil(n_unl / max(n_lab, 1)) if n_unl else 0
    return cfg.batch_size * max(1, min(ratio, cfg.unlabeled_ratio_cap))


def steps_per_epoch(cfg: TrainConfig, n_lab: int, n_unl: int) -> int:
    if n_unl == 0:
        return math.ceil(n_lab / cfg.batch_size)
    return math.ceil(n_unl / unlabeled_batch_size(cfg, n_lab, n_unl))


def _lr(cfg: TrainConfig, state: TrainState) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return one_cycle_lr(state.step, state.total_steps, cfg.lr)


def _apply(cfg: TrainConfig, state: TrainState, grads, update_ema: bool, frozen=()) -> None:
    lr = _lr(cfg, state)
    state.opt, params = adamw_step(state.opt, state.model.params(), grads, lr=lr, frozen=frozen)
    state.model = state.model.with_params(params)
    state.step += 1
    if update_ema:
        decay = warmup_decay(cfg.ema_decay, state.ema.num_updates) if cfg.ema_warmup else cfg.ema_decay
        state.ema = ema_update(state.ema, params, decay=decay)


def prepare(ds: SsmllDataset, cfg: TrainConfig):
    """Crop every split to the configured patch count."""
    n = cfg.n_patches or ds.n_patches
    return (crop_split(ds.labeled, n), crop_split(ds.unlabeled, n), crop_split(ds.test, n))


def init_state(ds: SsmllDataset, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    model = DualModel.init(ds.dim, ds.n_classes, cfg.hidden or None, rng)
    params = model.params()
    opt = OptimizerState.zeros_like(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_lab, n_unl = len(ds.labeled), len(ds.unlabeled)
    # supervised runs take the same number of steps, just without unlabeled batches
    total = (cfg.warmup_epochs * math.ceil(n_lab / cfg.batch_size)
             + (cfg.epochs - cfg.warmup_epochs) * steps_per_epoch(cfg, n_lab, n_unl))
    return TrainState(model, opt, EmaState.from_params(params, cfg.ema_decay), rng,
                      total_steps=max(total, 1))


def warmup(state: TrainState, labeled: Split, cfg: TrainConfig) -> TrainState:
    """Supervised training of backbone + generator heads; EMA restarts from the result."""
    if len(labeled) == 0:
        raise ValidationError("warm-up needs labeled data")
    strong = cfg.aug("strong")
    loss_cfg = cfg.loss_cfg()
    # weight decay alone would otherwise shrink the utilizer heads
    util_keys = [k for k in state.model.params() if k.startswith("util.")]
    for e in range(cfg.warmup_epochs):
        losses = []
        for idx in _batches(len(labeled), cfg.batch_size, state.rng):
            batch = _augmented(labeled.take(idx), strong, state.rng)
            res = d2l_losses(batch, None, None, state.model, cfg.alpha, loss_cfg)
            _apply(cfg, state, res.grads, update_ema=False, frozen=util_keys)
            losses.append(res.loss_l)
        state.epoch += 1
        state.history.append({"epoch": state.epoch, "phase": "warmup",
                              "loss_l": float(np.mean(losses)), "loss_u": 0.0})
    state.ema = EmaState.from_params(state.model.params(), cfg.ema_decay)
    return state


def weak_scores(model: DualModel, split: Split, cfg: TrainConfig, rng, policy="gen") -> np.ndarray:
    view = _augmented(split, cfg.aug("weak"), rng)
    return predict_batch(model, view.global_, view.patches, cfg.alpha, policy)


def select_pseudo_labels(cfg: TrainConfig, q_l, y_l, q_u):
    """Run the configured strategy: returns (ThresholdVector or None, pseudo-labels)."""
    K = y_l.shape[1]
    if cfg.strategy == "mat":
        tau = mat_search(q_l, y_l, cfg.metric_kind(), GridSpec(cfg.grid_step), workers=cfg.workers)
    elif cfg.strategy == "cap":
        tau = cap_thresholds(q_u, y_l)
    elif cfg.strategy == "fixed":
        tau = fixed_thresholds(cfg.fixed_tau, K)
    elif cfg.strategy == "topk":
        return None, topk_pseudo_labels(q_u, min(cfg.topk, K))
    else:
        return None, np.zeros((q_u.shape[0], K), dtype=np.int64)
    return tau, generate_pseudo_labels(q_u, tau)


def labeled_monitor(model: DualModel, labeled: Split, cfg: TrainConfig) -> float:
    """Mean over classes of the best grid F-beta of the generator heads on labeled data."""
    q = predict_batch(model, labeled.global_, labeled.patches, cfg.alpha, "gen")
    tv = mat_search(q, labeled.labels, MetricKind("fbeta", cfg.beta), GridSpec(cfg.grid_step))
    live = ~tv.degenerate
    return float(tv.values[live].mean()) if live.any() else 0.0


def evaluate(model: DualModel, test: Split, cfg: TrainConfig) -> dict:
    """mAP / CF1 / OF1 on clean test views with the configured head-pair policy."""
    if len(test) == 0:
        raise ValidationError("evaluation needs a non-empty test split")
    scores = predict_batch(model, test.global_, test.patches, cfg.alpha, cfg.effective_eval_policy)
    out = metric_bundle(scores, test.labels, cfg.eval_threshold)
    out["scores"] = scores
    return out


def train_epoch(state: TrainState, labeled: Split, unlabeled: Split, cfg: TrainConfig,
                audit: Optional[np.ndarray] = None, test: Optional[Split] = None) -> TrainState:
    """One outer iteration: thresholds, pseudo-labels, then joint mini-batch updates."""
    gen_model = state.ema_model() if cfg.threshold_source == "ema" else state.model
    use_unlabeled = cfg.strategy != "supervised" and len(unlabeled) > 0
    row: dict = {"epoch": state.epoch + 1, "phase": "main"}

    pseudo = None
    if use_unlabeled:
        q_l = weak_scores(gen_model, labeled, cfg, state.rng)
        q_u = weak_scores(gen_model, unlabeled, cfg, state.rng)
        tau, pseudo = select_pseudo_labels(cfg, q_l, labeled.labels, q_u)
        row["tau"] = None if tau is None else [float(t) for t in tau.tau]
        row["tau_degenerate"] = [] if tau is None else [int(k) for k in np.flatnonzero(tau.degenerate)]
        row["pl_positive_rate"] = float(pseudo.mean())
        if audit is not None:
            q = cf1_of1(pseudo, audit)
            row.update({f"pl_{k}": v for k, v in q.items()})

    loss_cfg = cfg.loss_cfg()
    strong = cfg.aug("strong")
    n_lab, n_unl = len(labeled), len(unlabeled)
    n_steps = steps_per_epoch(cfg, n_lab, n_unl)
    bs_u = unlabeled_batch_size(cfg, n_lab, n_unl)
    u_batches = _batches(n_unl, bs_u, state.rng) if use_unlabeled else []
    l_batches: List[np.ndarray] = []
    losses_l, losses_u = [], []
    for s in range(n_steps):
        if not l_batches:
            l_batches = _batches(n_lab, cfg.batch_size, state.rng)
        l_idx = l_batches.pop(0)
        b_l = _augmented(labeled.take(l_idx), strong, state.rng)
        if use_unlabeled:
            u_idx = u_batches[s]
            b_u = _augmented(unlabeled.take(u_idx), strong, state.rng)
            res = d2l_losses(b_l, b_u, pseudo[u_idx], state.model, cfg.alpha, loss_cfg)
        else:
            res = d2l_losses(b_l, None, None, state.model, cfg.alpha, loss_cfg)
        _apply(cfg, state, res.grads, update_ema=True)
        losses_l.append(res.loss_l)
        losses_u.append(res.loss_u)

    state.epoch += 1
    row["loss_l"] = float(np.mean(losses_l))
    row["loss_u"] = float(np.mean(losses_u))
    row["lr"] = _lr(cfg, state)

    ema_model = state.ema_model()
    monitor = labeled_monitor(ema_model, labeled, cfg)
    row["monitor"] = monitor
    if test is not None:
        ev = evaluate(ema_model, test, cfg)
        row.update({"test_mAP": ev["mAP"], "test_CF1": ev["CF1"], "test_OF1": ev["OF1"]})
    if monitor > state.best_monitor:
        state.best_monitor = monitor
        state.best_epoch = state.epoch
        state.best_params = {k: v.copy() for k, v in state.ema.shadow.items()}
        state.stale = 0
    else:
        state.stale += 1
    state.history.append(row)
    return state


def fit(ds: SsmllDataset, cfg: TrainConfig, record_test: bool = True) -> TrainState:
    """Warm-up, then joint epochs until the budget or early stopping ends the run."""
    labeled, unlabeled, test = prepare(ds, cfg)
    state = init_state(ds, cfg)
    state = warmup(state, labeled, cfg)
    audit = ds.audit_labels()
    for _ in range(cfg.epochs - cfg.warmup_epochs):
        state = train_epoch(state, labeled, unlabeled, cfg, audit=audit,
                            test=test if record_test else None)
        if state.stale >= cfg.patience:
            state.stopped_early = True
            log.info("early stop at epoch %d (best %d)", state.epoch, state.best_epoch)
            break
    if state.best_params is None:
        state.best_params = {k: v.copy() for k, v in state.ema.shadow.items()}
        state.best_epoch = state.epoch
    return state


def best_model(state: TrainState) -> DualModel:
    return state.model.with_params(state.best_params)
