"""Experiment configs, single runs, seed sweeps and their on-disk artifacts.

A run writes into its output directory::

    report.json        config echo, per-epoch rows, final metrics
    trace.csv          per-epoch scalar trace
    tau_trace.csv      per-epoch class thresholds
    test_scores.csv    final test probabilities (test_labels.csv alongside)
    model.npz          best EMA parameters + metadata
    figures/*.png      when figures are enabled
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from d2lmat.d2l import DualModel
from d2lmat.data import (
    SsmllDataset,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_matrix,
    split_labeled,
)
from d2lmat.errors import ConfigError, DataError
from d2lmat.training import TrainConfig, best_model, evaluate, fit, prepare

log = logging.getLogger(__name__)

OUTPUT_ENV = "D2LMAT_OUTPUT_DIR"
FLOAT_FMT = "%.17g"

TRACE_COLUMNS = [
    "epoch", "phase", "lr", "loss_l", "loss_u", "monitor",
    "pl_CF1", "pl_CP", "pl_CR", "pl_OF1", "pl_positive_rate",
    "test_mAP", "test_CF1", "test_OF1",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def write_csv(path, header: List[str], rows: Iterable[Iterable[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# --- config ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "run"
    data: Dict[str, Any] = field(default_factory=dict)
    p: float = 0.05
    split_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Optional[str] = None
    figures: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        allowed = {"name", "data", "split", "train", "output_dir", "figures"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}")
        data = d.get("data", {})
        if not isinstance(data, dict):
            raise ConfigError("must be an object", "data")
        if "path" not in data:
            try:
                SynthConfig.from_dict(data)
            except ConfigError as exc:
                path = f"data.{exc.path}" if exc.path and exc.path != "data" else "data"
                raise ConfigError(str(exc).split(": ", 1)[-1], path) from None
            except TypeError as exc:
                raise ConfigError(str(exc), "data") from None
        split = d.get("split", {})
        if not isinstance(split, dict) or set(split) - {"p", "seed"}:
            raise ConfigError("must be an object with keys p, seed", "split")
        p = split.get("p", 0.05)
        if not isinstance(p, (int, float)) or not 0 < p < 1:
            raise ConfigError("must lie in (0, 1)", "split.p")
        train = d.get("train", {})
        if not isinstance(train, dict):
            raise ConfigError("must be an object", "train")
        return cls(
            name=str(d.get("name", "run")),
            data=dict(data),
            p=float(p),
            split_seed=int(split.get("seed", 0)),
            train=TrainConfig.from_dict(train),
            output_dir=d.get("output_dir"),
            figures=bool(d.get("figures", True)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "data": self.data,
            "split": {"p": self.p, "seed": self.split_seed},
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "figures": self.figures,
        }


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / cfg.name


def build_dataset(cfg: ExperimentConfig) -> SsmllDataset:
    if "path" in cfg.data:
        return load_dataset(cfg.data["path"])
    synth = SynthConfig.from_dict(cfg.data)
    return split_labeled(generate_synthetic(synth), cfg.p, cfg.split_seed)


# --- model files -----------------------------------------------------------


def save_model(path, model: DualModel, cfg: TrainConfig, n_classes: int, dim: int) -> None:
    meta = {"train": cfg.to_dict(), "K": n_classes, "d": dim}
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.params())


def load_model(path):
    """Return ``(model, TrainConfig, meta)`` from :func:`save_model` output."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    cfg = TrainConfig.from_dict(meta["train"])
    rng = np.random.default_rng(0)
    hidden = params["backbone.W"].shape[1] if "backbone.W" in params else None
    skeleton = DualModel.init(meta["d"], meta["K"], hidden, rng)
    return skeleton.with_params(params), cfg, meta


# --- single run ------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Optional[SsmllDataset] = None,
                   write: bool = True) -> dict:
    """Train, evaluate, and (optionally) write every artifact. Returns the report."""
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else build_dataset(cfg)
    tcfg = cfg.train
    state = fit(ds, tcfg)
    model = best_model(state)
    _, _, test = prepare(ds, tcfg)
    ev = evaluate(model, test, tcfg)
    scores = ev.pop("scores")

    last_main = [r for r in state.history if r.get("phase") == "main"]
    final_pl = {k: last_main[-1][k] for k in ("pl_CF1", "pl_CP", "pl_CR", "pl_OF1")
                if last_main and k in last_main[-1]}
    report = {
        "config": cfg.to_dict(),
        "dataset": {
            "K": ds.n_classes, "d": ds.dim, "n": ds.n_patches,
            "n_labeled": len(ds.labeled), "n_unlabeled": len(ds.unlabeled), "n_test": len(ds.test),
            "degenerate_classes": ds.degenerate_classes(),
        },
        "epochs": state.history,
        "final": {
            "best_epoch": state.best_epoch,
            "epochs_run": state.epoch,
            "stopped_early": state.stopped_early,
            "eval_policy": tcfg.effective_eval_policy,
            "test": ev,
            "pseudo_label_quality": final_pl,
        },
        "wall_time_s": time.perf_counter() - t0,
    }
    if write:
        out = resolve_output_dir(cfg, out_dir)
        write_run_artifacts(out, report, scores, test.labels, model, tcfg, ds, figures=cfg.figures)
        report["output_dir"] = str(out)
    return report


def write_run_artifacts(out: Path, report: dict, scores, labels, model, tcfg, ds, figures=True):
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report)
    write_csv(out / "trace.csv", TRACE_COLUMNS,
              ([row.get(c) for c in TRACE_COLUMNS] for row in report["epochs"]))
    K = ds.n_classes
    tau_rows = [[row["epoch"]] + list(row["tau"]) for row in report["epochs"] if row.get("tau")]
    write_csv(out / "tau_trace.csv", ["epoch"] + [f"class_{k}" for k in range(K)], tau_rows)
    save_matrix(out / "test_scores.csv", scores)
    save_matrix(out / "test_labels.csv", labels)
    save_model(out / "model.npz", model, tcfg, K, ds.dim)
    if figures:
        from d2lmat import plotting

        plotting.render_run(report, out / "figures")


def strip_wall_time(report: dict) -> dict:
    r = copy.deepcopy(report)
    r.pop("wall_time_s", None)
    r.pop("output_dir", None)
    return r


# --- sweeps ----------------------------------------------------------------


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


@dataclass
class Sweep:
    name: str
    base: dict
    seeds: List[int]
    variants: List[dict]  # {"name": str, "set": {dotted.path: value}}
    workers: int = 1
    figures: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Sweep":
        if not isinstance(d, dict):
            raise ConfigError("sweep must be a JSON object")
        unknown = sorted(set(d) - {"name", "base", "seeds", "variants", "axis", "workers", "figures"})
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}", "sweep")
        base = d.get("base", {})
        ExperimentConfig.from_dict(base)
        seeds = d.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("must be a non-empty list of integers", "seeds")
        variants = list(d.get("variants", []))
        axis = d.get("axis")
        if axis is not None:
            try:
                paths = axis["paths"] if "paths" in axis else [axis["path"]]
                for v in axis["values"]:
                    variants.append({"name": f"{axis.get('name', paths[0])}={v}",
                                     "set": {p: v for p in paths}})
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"axis needs path(s) and values ({exc})", "axis") from None
        if not variants:
            raise ConfigError("sweep needs variants or an axis", "variants")
        for i, v in enumerate(variants):
            if "name" not in v or not isinstance(v.get("set", {}), dict):
                raise ConfigError("each variant needs a name and a 'set' object", f"variants[{i}]")
            ExperimentConfig.from_dict(variant_config(base, v, seeds[0]))
        return cls(str(d.get("name", "sweep")), base, seeds, variants,
                   int(d.get("workers", 1)), bool(d.get("figures", True)))


def variant_config(base: dict, variant: dict, seed: int) -> dict:
    """Base config with the variant overrides and ``seed`` applied to data, split and training."""
    d = copy.deepcopy(base)
    d.setdefault("data", {})
    if "path" not in d["data"]:
        d["data"]["seed"] = seed
    d.setdefault("split", {})["seed"] = seed
    d.setdefault("train", {})["seed"] = seed
    for path, value in variant.get("set", {}).items():
        set_path(d, path, value)
    d["name"] = f"{variant['name']}_seed{seed}"
    return d


def _run_one(args):
    cfg_dict, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    rep = run_experiment(cfg, out_dir=out_dir, write=out_dir is not None)
    return summarize_report(rep)


def summarize_report(rep: dict) -> dict:
    fin = rep["final"]
    pl = fin["pseudo_label_quality"]
    return {
        "test_mAP": fin["test"]["mAP"],
        "test_CF1": fin["test"]["CF1"],
        "test_OF1": fin["test"]["OF1"],
        "pl_CF1": pl.get("pl_CF1"),
        "pl_CP": pl.get("pl_CP"),
        "pl_CR": pl.get("pl_CR"),
        "best_epoch": fin["best_epoch"],
        "epochs_run": fin["epochs_run"],
        "pl_CF1_trace": [r.get("pl_CF1") for r in rep["epochs"] if r.get("phase") == "main"],
    }


COMPARISON_COLUMNS = ["variant", "seed", "test_mAP", "test_CF1", "test_OF1", "pl_CF1", "pl_CP", "pl_CR",
                      "best_epoch", "epochs_run"]
SUMMARY_COLUMNS = ["variant", "n_seeds", "mAP_mean", "mAP_std", "CF1_mean", "OF1_mean", "pl_CF1_mean"]


def run_sweep(sweep: Sweep, out_dir=None, save_runs: bool = False) -> dict:
    """Run every (variant, seed) pair; write comparison.csv and summary.csv.

    Results do not depend on ``sweep.workers``: each run owns its seeded RNG.
    """
    out = Path(out_dir) if out_dir is not None else Path(os.environ.get(OUTPUT_ENV, "runs")) / sweep.name
    jobs = []
    for v in sweep.variants:
        for s in sweep.seeds:
            run_dir = str(out / "runs" / f"{v['name']}_seed{s}") if save_runs else None
            jobs.append(((v["name"], s), (variant_config(sweep.base, v, s), run_dir)))
    if sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            results = list(pool.map(_run_one, [j[1] for j in jobs]))
    else:
        results = [_run_one(j[1]) for j in jobs]

    rows = []
    for (name, seed), res in zip((j[0] for j in jobs), results):
        rows.append({"variant": name, "seed": seed, **res})
    summary = summarize_rows(rows, [v["name"] for v in sweep.variants])

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "comparison.csv", COMPARISON_COLUMNS, ([r[c] for c in COMPARISON_COLUMNS] for r in rows))
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, ([s[c] for c in SUMMARY_COLUMNS] for s in summary))
    max_ep = max((len(r["pl_CF1_trace"]) for r in rows), default=0)
    write_csv(out / "pl_trace.csv", ["variant", "seed"] + [f"epoch_{i + 1}" for i in range(max_ep)],
              ([r["variant"], r["seed"]] + r["pl_CF1_trace"] + [None] * (max_ep - len(r["pl_CF1_trace"]))
               for r in rows))
    result = {"name": sweep.name, "rows": rows, "summary": summary, "output_dir": str(out)}
    if sweep.figures:
        from d2lmat import plotting

        plotting.render_sweep(result, out / "figures")
    return result


def summarize_rows(rows: List[dict], order: List[str]) -> List[dict]:
    out = []
    for name in order:
        sel = [r for r in rows if r["variant"] == name]
        m = np.array([r["test_mAP"] for r in sel])
        pl = [r["pl_CF1"] for r in sel if r["pl_CF1"] is not None]
        out.append({
            "variant": name,
            "n_seeds": len(sel),
            "mAP_mean": float(m.mean()),
            "mAP_std": float(m.std(ddof=1)) if len(m) > 1 else 0.0,
            "CF1_mean": float(np.mean([r["test_CF1"] for r in sel])),
            "OF1_mean": float(np.mean([r["test_OF1"] for r in sel])),
            "pl_CF1_mean": float(np.mean(pl)) if pl else None,
        })
    return out


def load_sweep(path) -> Sweep:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return Sweep.from_dict(raw)
