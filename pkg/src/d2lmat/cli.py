"""Command-line entry point: ``d2lmat <command> ...``.

Outputs go to ``--out`` if given, else ``$D2LMAT_OUTPUT_DIR``, else ``./runs``.
Exit status: 0 success, 2 bad configuration, 3 bad input data.
"""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from d2lmat.data import crop_split, load_matrix, load_split, save_dataset, save_matrix, SynthConfig
from d2lmat.errors import ConfigError, D2LError, DataError, ValidationError
from d2lmat.experiment import (
    OUTPUT_ENV,
    build_dataset,
    dump_json,
    load_config,
    load_model,
    load_sweep,
    run_experiment,
    run_sweep,
)
from d2lmat.metrics import MetricKind, metric_bundle
from d2lmat.thresholding import GridSpec, mat_search

EXIT_CONFIG = 2
EXIT_DATA = 3


def _out_dir(out, default_name: str) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / default_name


def _fail(code: int, exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library errors to exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, exc)
        except D2LError as exc:
            _fail(EXIT_DATA, exc)

    return wrapper


def _load_scores_labels(scores_path, labels_path):
    s = load_matrix(scores_path)
    y = load_matrix(labels_path, expected_cols=s.shape[1] if s.ndim == 2 else None)
    if s.shape != y.shape:
        raise DataError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise DataError(f"{labels_path}: labels must be 0/1")
    if np.any((s < 0) | (s > 1)):
        raise DataError(f"{scores_path}: scores must lie in [0, 1]")
    return s, y.astype(np.int64)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Semi-supervised multi-label training with per-class threshold calibration."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("generate-data")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Dataset directory.")
@_guard
def generate_data(config, out):
    """Draw the synthetic dataset described by CONFIG and write it as CSV."""
    cfg = load_config(config)
    if "path" in cfg.data:
        raise ConfigError("generate-data needs a synthetic data block, not a path", "data.path")
    ds = build_dataset(cfg)
    target = _out_dir(out, f"{cfg.name}_data")
    manifest = save_dataset(target, ds, SynthConfig.from_dict(cfg.data))
    click.echo(str(manifest))


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Run directory.")
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
@_guard
def train(config, out, no_figures):
    """Run one experiment from CONFIG; writes report, traces, scores and model."""
    cfg = load_config(config)
    if no_figures:
        cfg.figures = False
    report = run_experiment(cfg, out_dir=out)
    test = report["final"]["test"]
    click.echo(f"test mAP={test['mAP']:.4f} CF1={test['CF1']:.4f} OF1={test['OF1']:.4f} "
               f"-> {report['output_dir']}")


@main.command()
@click.argument("model", type=click.Path(exists=True, dir_okay=False))
@click.argument("split", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Where to write report.json and scores.")
@_guard
def evaluate(model, split, out):
    """Score the SPLIT directory with a saved MODEL."""
    from d2lmat.training import evaluate as eval_model

    net, cfg, meta = load_model(model)
    data = load_split(split)
    if data.labels is None:
        raise DataError(f"{split}: no labels.csv to evaluate against")
    if data.global_.shape[1] != meta["d"] or data.labels.shape[1] != meta["K"]:
        raise DataError(f"{split}: shape does not match model (d={meta['d']}, K={meta['K']})")
    data = crop_split(data, cfg.n_patches or data.n_patches)
    res = eval_model(net, data, cfg)
    scores = res.pop("scores")
    target = _out_dir(out, "evaluate")
    target.mkdir(parents=True, exist_ok=True)
    dump_json(target / "report.json", res)
    save_matrix(target / "scores.csv", scores)
    click.echo(f"mAP={res['mAP']:.4f} CF1={res['CF1']:.4f} OF1={res['OF1']:.4f} -> {target}")


@main.command()
@click.option("--scores", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metric", type=click.Choice(["fbeta", "precision", "recall"]), default="fbeta")
@click.option("--beta", type=float, default=0.5, show_default=True)
@click.option("--step", type=float, default=0.01, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--verify", is_flag=True, help="Cross-check against the brute-force search.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output JSON path.")
@_guard
def calibrate(scores, labels, metric, beta, step, workers, verify, out):
    """Pick per-class thresholds on labeled scores; writes thresholds.json."""
    s, y = _load_scores_labels(scores, labels)
    try:
        kind = MetricKind(metric, beta)
        grid = GridSpec(step)
    except ValidationError as exc:
        raise ConfigError(str(exc), "beta" if "beta" in str(exc) else "step") from None
    tv = mat_search(s, y, kind, grid, workers=workers)
    payload = {"metric": kind.label(), "step": step, **tv.to_dict()}
    if verify:
        from d2lmat.oracle import brute_force_thresholds

        ref = brute_force_thresholds(s, y, kind, grid)
        ok = bool(np.array_equal(ref.tau, tv.tau) and np.array_equal(ref.values, tv.values))
        payload["verified"] = ok
        if not ok:
            click.echo("warning: brute-force search disagrees", err=True)
    path = Path(out) if out else _out_dir(None, "calibrate") / "thresholds.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(path, payload)
    click.echo(str(path))
    if verify and not payload["verified"]:
        sys.exit(1)


@main.command()
@click.option("--scores", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--verify", is_flag=True, help="Cross-check against the reference implementation.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output JSON path.")
@_guard
def metrics(scores, labels, threshold, verify, out):
    """mAP, CF1 and OF1 of a score matrix; writes report.json."""
    s, y = _load_scores_labels(scores, labels)
    rep = metric_bundle(s, y, threshold)
    if verify:
        from d2lmat.oracle import naive_metrics

        ref = naive_metrics(s, y, threshold)
        keys = ("mAP", "CF1", "OF1", "CP", "CR", "OP", "OR")
        diff = max(abs(ref[k] - rep[k]) for k in keys)
        rep["verified"] = bool(diff <= 1e-12)
        rep["verify_max_abs_diff"] = diff
    path = Path(out) if out else _out_dir(None, "metrics") / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(path, rep)
    click.echo(f"mAP={rep['mAP']:.4f} CF1={rep['CF1']:.4f} OF1={rep['OF1']:.4f} -> {path}")
    if verify and not rep["verified"]:
        sys.exit(1)


@main.command()
@click.argument("sweep", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Sweep directory.")
@click.option("--workers", type=int, default=None, help="Override the sweep's worker count.")
@click.option("--save-runs", is_flag=True, help="Also keep every run's artifacts.")
@_guard
def compare(sweep, out, workers, save_runs):
    """Run a multi-seed comparison; writes comparison.csv and summary.csv."""
    sw = load_sweep(sweep)
    if workers is not None:
        sw.workers = workers
    res = run_sweep(sw, out_dir=_out_dir(out, sw.name), save_runs=save_runs)
    for s in res["summary"]:
        click.echo(f"{s['variant']:>20s}  mAP {s['mAP_mean']:.4f} ± {s['mAP_std']:.4f}")
    click.echo(res["output_dir"])


if __name__ == "__main__":  # pragma: no cover
    main()
