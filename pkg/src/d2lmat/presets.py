"""Ready-made experiment and sweep configs for the desk-scale benchmark.

The benchmark: K=10 classes, d=32 features, n=4 patches, 2100 training rows
(5% labeled) and 1000 test rows. Rarer classes (prior 0.1) and noisier
features (sigma 0.7) than the generator defaults leave the supervised
baseline with something to gain from unlabeled data.

``configs/*.json`` in the repository are dumps of these functions.
"""

from __future__ import annotations

import copy
from typing import Dict, List

SEEDS = [0, 1, 2, 3, 4]

BENCH_DATA = {
    "n_classes": 10,
    "dim": 32,
    "n_patches": 4,
    "n_total": 3100,
    "n_test": 1000,
    "priors": [0.1] * 10,
    "sigma_feat": 0.7,
}

# one optimiser setting shared by every method
BENCH_TRAIN = {"lr": 0.003, "hidden": 64}

STRATEGIES = {
    "mat": {"train.strategy": "mat"},
    "cap": {"train.strategy": "cap"},
    "fixed0.5": {"train.strategy": "fixed", "train.fixed_tau": 0.5},
    "topk2": {"train.strategy": "topk", "train.topk": 2},
    "supervised": {"train.strategy": "supervised"},
}


def bench_experiment(strategy: str = "mat", seed: int = 0, p: float = 0.05) -> dict:
    d = {
        "name": f"bench_{strategy}",
        "data": dict(BENCH_DATA, seed=seed),
        "split": {"p": p, "seed": seed},
        "train": dict(BENCH_TRAIN, seed=seed),
    }
    for path, value in STRATEGIES.get(strategy, {"train.strategy": strategy}).items():
        section, key = path.split(".")
        d[section][key] = value
    return d


def _base() -> dict:
    return {"data": dict(BENCH_DATA), "split": {"p": 0.05}, "train": dict(BENCH_TRAIN)}


def comparison_sweep(seeds: List[int] = SEEDS) -> dict:
    return {
        "name": "strategy_comparison",
        "base": _base(),
        "seeds": list(seeds),
        "variants": [{"name": k, "set": dict(v)} for k, v in STRATEGIES.items()],
    }


def ablation_sweeps(seeds: List[int] = SEEDS) -> Dict[str, dict]:
    """One sweep per ablation axis, all on the benchmark data with MAT."""
    base = _base()
    metric = [
        {"name": "fbeta0.5", "set": {"train.metric": "fbeta", "train.beta": 0.5}},
        {"name": "precision", "set": {"train.metric": "precision"}},
        {"name": "recall", "set": {"train.metric": "recall"}},
    ]
    return {
        "ablation_metric": {"name": "ablation_metric", "base": copy.deepcopy(base),
                            "seeds": list(seeds), "variants": metric},
        "ablation_beta": {"name": "ablation_beta", "base": copy.deepcopy(base), "seeds": list(seeds),
                          "axis": {"name": "beta", "paths": ["train.beta"],
                                   "values": [0.25, 0.5, 1.0, 2.0]}},
        # the patch count is a property of the data, so it is regenerated per value
        "ablation_patches": {"name": "ablation_patches", "base": copy.deepcopy(base), "seeds": list(seeds),
                             "axis": {"name": "n", "paths": ["data.n_patches"], "values": [1, 4, 9]}},
        "ablation_alpha": {"name": "ablation_alpha", "base": copy.deepcopy(base), "seeds": list(seeds),
                           "axis": {"name": "alpha", "paths": ["train.alpha"],
                                    "values": [0.1, 0.5, 1.0, 1.5, 2.0]}},
    }


def proportion_sweep(seeds: List[int] = SEEDS) -> dict:
    base = _base()
    return {"name": "labeled_proportion", "base": base, "seeds": list(seeds),
            "variants": [{"name": f"{strat}_p{p}", "set": {"split.p": p, **STRATEGIES[strat]}}
                         for p in (0.05, 0.1, 0.15, 0.2) for strat in ("mat", "supervised")]}


def all_configs() -> Dict[str, dict]:
    """File name (without ``.json``) -> config, as shipped under ``configs/``."""
    out = {"experiment_mat": bench_experiment("mat"), "strategy_comparison": comparison_sweep(),
           "labeled_proportion": proportion_sweep()}
    out.update(ablation_sweeps())
    return out
