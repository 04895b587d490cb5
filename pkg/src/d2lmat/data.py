"""Synthetic correlated multi-label data, labeled/unlabeled splits, CSV I/O.

Instances are generated patch-first: each positive class drops its prototype
into one of ``n`` patches, and the whole-instance (global) view is the mean of
the patches plus noise. Label co-occurrence comes from a Gaussian copula with
block-structured correlation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import optimize, stats

from d2lmat.errors import ConfigError, DataError, DimensionError, ValidationError

log = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 10
    dim: int = 32
    n_patches: int = 4
    n_total: int = 3100
    n_test: int = 1000
    priors: Optional[Sequence[float]] = None  # defaults to 0.2 per class
    rho_corr: float = 0.5
    blocks: Optional[Sequence[Sequence[int]]] = None  # defaults to consecutive pairs
    sigma_proto: float = 1.0
    sigma_feat: float = 1.0
    require_nonempty: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "dim", "n_patches", "n_total"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be a positive integer", name)
        if not 0 <= self.n_test < self.n_total:
            raise ConfigError("must satisfy 0 <= n_test < n_total", "n_test")
        if not 0.0 <= self.rho_corr < 1.0:
            raise ConfigError("must lie in [0, 1)", "rho_corr")
        if self.sigma_proto <= 0 or self.sigma_feat < 0:
            raise ConfigError("noise scales must be positive", "sigma_proto/sigma_feat")
        pri = self.prior_vector()
        if pri.shape != (self.n_classes,):
            raise ConfigError(f"expected {self.n_classes} entries", "priors")
        if np.any(pri <= 0) or np.any(pri >= 1):
            raise ConfigError("entries must lie in (0, 1)", "priors")

    def prior_vector(self) -> np.ndarray:
        if self.priors is None:
            return np.full(self.n_classes, 0.2)
        return np.asarray(self.priors, dtype=np.float64).ravel()

    def block_list(self) -> List[List[int]]:
        if self.blocks is not None:
            return [list(map(int, b)) for b in self.blocks]
        K = self.n_classes
        return [list(range(i, min(i + 2, K))) for i in range(0, K, 2)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priors"] = None if self.priors is None else [float(p) for p in self.priors]
        d["blocks"] = None if self.blocks is None else [list(map(int, b)) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown field(s) {sorted(unknown)}", "data")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def priors_for_mean_labels(n_classes: int, target: float, nonempty: bool = True) -> np.ndarray:
    """Uniform prior giving ``target`` expected positives per instance.

    With ``nonempty`` the expectation is conditioned on at least one positive
    (independent labels), matching generation with empty-row resampling.
    """
    if nonempty:
        def gap(p):
            return n_classes * p / (1.0 - (1.0 - p) ** n_classes) - target
        p = optimize.brentq(gap, 1e-9, 1 - 1e-9)
    else:
        p = target / n_classes
    return np.full(n_classes, p)


def correlation_matrix(cfg: SynthConfig) -> np.ndarray:
    """Identity plus ``rho_corr`` off-diagonal inside each co-occurrence block."""
    K = cfg.n_classes
    sigma = np.eye(K)
    seen = set()
    for b, block in enumerate(cfg.block_list()):
        for k in block:
            if not 0 <= k < K:
                raise ConfigError(f"class index {k} out of range", f"blocks[{b}]")
            if k in seen:
                raise ConfigError(f"class {k} appears in more than one block", f"blocks[{b}]")
            seen.add(k)
        for i in block:
            for j in block:
                if i != j:
                    sigma[i, j] = cfg.rho_corr
    return sigma


@dataclass
class Split:
    """Arrays for one split: global views (N, d), patch views (N, n, d), labels (N, K)."""

    global_: np.ndarray
    patches: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.global_ = np.asarray(self.global_, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.global_.ndim != 2 or self.patches.ndim != 3:
            raise DimensionError("global views must be (N, d) and patches (N, n, d)")
        N, d = self.global_.shape
        if self.patches.shape[0] != N or self.patches.shape[2] != d:
            raise DimensionError(f"patches {self.patches.shape} do not match global {self.global_.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.ndim != 2 or self.labels.shape[0] != N:
                raise DimensionError("labels must be (N, K)")

    def __len__(self):
        return self.global_.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    def take(self, idx) -> "Split":
        return Split(self.global_[idx], self.patches[idx],
                     None if self.labels is None else self.labels[idx])


@dataclass(frozen=True)
class PatchedInstance:
    global_features: np.ndarray
    patch_features: np.ndarray

    @property
    def n(self) -> int:
        return self.patch_features.shape[0]


@dataclass
class RawDataset:
    """Generator output before the labeled/unlabeled split."""

    global_: np.ndarray
    patches: np.ndarray
    labels: np.ndarray
    assignment: np.ndarray  # (N, K) patch index holding class k, -1 if absent
    prototypes: np.ndarray
    cfg: SynthConfig

    def instance(self, i: int) -> PatchedInstance:
        return PatchedInstance(self.global_[i], self.patches[i])


class SsmllDataset:
    """Labeled, unlabeled and test splits.

    True labels of the unlabeled split are held privately and only handed out
    by :meth:`audit_labels`, which the reporting path uses to score
    pseudo-label quality. Training code receives ``unlabeled`` without labels.
    """

    def __init__(self, labeled: Split, unlabeled: Split, test: Split,
                 audit: Optional[np.ndarray] = None, meta: Optional[dict] = None):
        if labeled.labels is None or test.labels is None:
            raise ValidationError("labeled and test splits need labels")
        self.labeled = labeled
        self.unlabeled = Split(unlabeled.global_, unlabeled.patches, None)
        self.test = test
        self._audit = None if audit is None else np.asarray(audit, dtype=np.int64)
        self.meta = dict(meta or {})
        dims = {labeled.global_.shape[1], unlabeled.global_.shape[1], test.global_.shape[1]}
        if len(dims) != 1:
            raise DimensionError("splits disagree on feature dimension")

    @property
    def n_classes(self) -> int:
        return self.labeled.labels.shape[1]

    @property
    def dim(self) -> int:
        return self.labeled.global_.shape[1]

    @property
    def n_patches(self) -> int:
        return self.labeled.n_patches

    def audit_labels(self) -> Optional[np.ndarray]:
        return self._audit

    def degenerate_classes(self) -> List[int]:
        return [int(k) for k in np.flatnonzero(self.labeled.labels.sum(axis=0) == 0)]


def generate_synthetic(cfg: SynthConfig) -> RawDataset:
    """Draw a dataset. Bit-reproducible from ``cfg`` (the seed lives in ``cfg``)."""
    rng = np.random.default_rng(cfg.seed)
    K, d, n, N = cfg.n_classes, cfg.dim, cfg.n_patches, cfg.n_total
    sigma = correlation_matrix(cfg)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("label correlation matrix is not positive definite", "blocks") from exc
    cut = stats.norm.ppf(1.0 - cfg.prior_vector())

    prototypes = rng.normal(0.0, cfg.sigma_proto, size=(K, d))

    def draw(m):
        u = rng.standard_normal((m, K)) @ chol.T
        return (u > cut).astype(np.int64)

    labels = draw(N)
    if cfg.require_nonempty:
        for _ in range(100):
            empty = np.flatnonzero(labels.sum(axis=1) == 0)
            if empty.size == 0:
                break
            labels[empty] = draw(empty.size)

    slot = rng.integers(0, n, size=(N, K))
    assignment = np.where(labels == 1, slot, -1)
    patches = rng.normal(0.0, cfg.sigma_feat, size=(N, n, d))
    for o in range(n):
        patches[:, o, :] += (assignment == o).astype(np.float64) @ prototypes
    if n == 1:
        global_ = patches[:, 0, :].copy()
    else:
        global_ = patches.mean(axis=1) + rng.normal(0.0, cfg.sigma_feat, size=(N, d))
    return RawDataset(global_, patches, labels, assignment, prototypes, cfg)


def crop(instance: PatchedInstance, n: int) -> PatchedInstance:
    """Patch decomposition of an instance: ``n=1`` is the global view itself."""
    if n == 1:
        return PatchedInstance(instance.global_features, instance.global_features[None, :].copy())
    if n != instance.n:
        raise DimensionError(f"instance stores {instance.n} patches, {n} requested")
    return instance


def crop_split(split: Split, n: int) -> Split:
    if n == 1:
        return Split(split.global_, split.global_[:, None, :].copy(), split.labels)
    if n != split.n_patches:
        raise DimensionError(f"split stores {split.n_patches} patches, {n} requested")
    return split


def split_labeled(raw: RawDataset, p: float, seed: int = 0) -> SsmllDataset:
    """Hold out the test rows, then label ``round(p * N_train)`` random train rows (at least one)."""
    if not 0.0 < p < 1.0:
        raise ValidationError(f"labeled proportion must lie in (0, 1), got {p}")
    N = raw.labels.shape[0]
    n_train = N - raw.cfg.n_test
    rng = np.random.default_rng(seed)
    n_lab = max(1, int(math.floor(p * n_train + 0.5)))
    n_lab = min(n_lab, n_train - 1) if n_train > 1 else n_train
    perm = rng.permutation(n_train)
    lab_idx = np.sort(perm[:n_lab])
    unl_idx = np.sort(perm[n_lab:])
    test_idx = np.arange(n_train, N)

    def part(idx):
        return Split(raw.global_[idx], raw.patches[idx], raw.labels[idx])

    labeled = part(lab_idx)
    unl = part(unl_idx)
    ds = SsmllDataset(labeled, Split(unl.global_, unl.patches), part(test_idx), audit=unl.labels,
                      meta={"p": p, "split_seed": seed, "labeled_index": lab_idx.tolist()})
    deg = ds.degenerate_classes()
    if deg:
        log.warning("classes with no labeled positives: %s", deg)
    ds.meta["degenerate_classes"] = deg
    return ds


# --- CSV matrices ---------------------------------------------------------


def class_header(K: int, prefix: str = "class") -> List[str]:
    return [f"{prefix}_{k}" for k in range(K)]


def save_matrix(path, matrix, header: Optional[Sequence[str]] = None) -> None:
    """Write a 2-D matrix as CSV with a header row and 17-significant-digit cells."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"save_matrix expects 2-D input, got {m.shape}")
    header = list(header) if header is not None else class_header(m.shape[1])
    if len(header) != m.shape[1]:
        raise DimensionError("header length differs from column count")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in m:
            w.writerow([FLOAT_FMT % v for v in row])


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_matrix(path, expected_cols: Optional[int] = None) -> np.ndarray:
    """Read a CSV written by :func:`save_matrix`. Errors carry 1-based row/col."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file, header row missing", row=1)
    header = rows[0]
    if not header or all(_is_number(c) for c in header):
        raise DataError(f"{path}: header row missing", row=1)
    K = len(header)
    if expected_cols is not None and K != expected_cols:
        raise DataError(f"{path}: expected {expected_cols} columns, header has {K}", row=1)
    out = np.empty((len(rows) - 1, K))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != K:
            raise DataError(f"{path}: ragged row ({len(row)} cells, expected {K})", row=r)
        for c, cell in enumerate(row, start=1):
            try:
                out[r - 2, c - 1] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r}", row=r, col=c) from None
    return out


def _patch_header(n: int, d: int) -> List[str]:
    return [f"patch{o}_f{j}" for o in range(n) for j in range(d)]


def save_split(directory, split: Split, labels_name: str = "labels.csv",
               labels: Optional[np.ndarray] = None) -> Dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    N, n, d = split.patches.shape
    save_matrix(directory / "global.csv", split.global_, class_header(d, "f"))
    save_matrix(directory / "patches.csv", split.patches.reshape(N, n * d), _patch_header(n, d))
    files = {"global": "global.csv", "patches": "patches.csv"}
    lab = split.labels if labels is None else labels
    if lab is not None:
        save_matrix(directory / labels_name, lab)
        files["labels"] = labels_name
    return files


def load_split(directory, n_patches: Optional[int] = None, labels_name: str = "labels.csv") -> Split:
    """Load a split directory. ``n_patches`` defaults to the value in a sibling manifest."""
    directory = Path(directory)
    g = load_matrix(directory / "global.csv")
    flat = load_matrix(directory / "patches.csv")
    d = g.shape[1]
    if n_patches is None:
        n_patches = flat.shape[1] // d if d else 0
    if flat.shape != (g.shape[0], n_patches * d):
        raise DataError(f"{directory}: patches.csv shape {flat.shape} inconsistent with global.csv")
    labels = None
    if (directory / labels_name).exists():
        labels = load_matrix(directory / labels_name)
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise DataError(f"{directory / labels_name}: labels must be 0/1")
        labels = labels.astype(np.int64)
    return Split(g, flat.reshape(g.shape[0], n_patches, d), labels)


def save_dataset(directory, ds: SsmllDataset, cfg: Optional[SynthConfig] = None) -> Path:
    """Write the three splits as CSV plus a ``manifest.json``."""
    directory = Path(directory)
    files = {
        "labeled": save_split(directory / "labeled", ds.labeled),
        "unlabeled": save_split(directory / "unlabeled", ds.unlabeled, "audit_labels.csv",
                                labels=ds.audit_labels()),
        "test": save_split(directory / "test", ds.test),
    }
    manifest = {
        "K": ds.n_classes,
        "d": ds.dim,
        "n": ds.n_patches,
        "seed": None if cfg is None else cfg.seed,
        "config_hash": None if cfg is None else cfg.hash(),
        "config": None if cfg is None else cfg.to_dict(),
        "p": ds.meta.get("p"),
        "split_seed": ds.meta.get("split_seed"),
        "sizes": {"labeled": len(ds.labeled), "unlabeled": len(ds.unlabeled), "test": len(ds.test)},
        "degenerate_classes": ds.degenerate_classes(),
        "files": {split: {k: f"{split}/{v}" for k, v in fs.items()} for split, fs in files.items()},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> SsmllDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest in {directory}: {exc}") from exc
    n = int(manifest["n"])
    labeled = load_split(directory / "labeled", n)
    unl = load_split(directory / "unlabeled", n, "audit_labels.csv")
    test = load_split(directory / "test", n)
    return SsmllDataset(labeled, Split(unl.global_, unl.patches), test, audit=unl.labels,
                        meta={"p": manifest.get("p"), "split_seed": manifest.get("split_seed")})
