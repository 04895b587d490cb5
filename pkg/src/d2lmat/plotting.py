"""Figures for single runs and sweeps. Always renders off-screen (Agg)."""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp in the file so reruns are byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _main_rows(report: dict) -> List[dict]:
    return [r for r in report["epochs"] if r.get("phase") == "main"]


def plot_pseudo_label_quality(report: dict, path) -> Path:
    rows = [r for r in _main_rows(report) if r.get("pl_CF1") is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r["epoch"] for r in rows]
        for key, style in (("pl_CF1", "-"), ("pl_CP", "--"), ("pl_CR", ":")):
            ax.plot(ep, [r[key] for r in rows], style, label=key[3:])
        ax.set_xlabel("epoch")
        ax.set_ylabel("pseudo-label quality")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_thresholds(report: dict, path) -> Path:
    rows = [r for r in _main_rows(report) if r.get("tau")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if rows:
            tau = np.array([r["tau"] for r in rows])
            ep = [r["epoch"] for r in rows]
            for k in range(tau.shape[1]):
                ax.plot(ep, tau[:, k], lw=1, label=f"class {k}")
            if tau.shape[1] <= 10:
                ax.legend(frameon=False, ncol=2, fontsize=7)
        ax.set_xlabel("epoch")
        ax.set_ylabel("threshold")
        ax.set_ylim(0, 1.02)
        return _save(fig, Path(path))


def plot_test_trace(report: dict, path) -> Path:
    rows = [r for r in _main_rows(report) if r.get("test_mAP") is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["test_mAP"] for r in rows], label="test mAP")
        ax.plot(ep, [r["monitor"] for r in rows], "--", label="labeled monitor")
        best = report["final"].get("best_epoch")
        if best:
            ax.axvline(best, color="grey", lw=0.8, ls=":")
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def render_run(report: dict, out_dir) -> List[Path]:
    out = Path(out_dir)
    paths = [plot_test_trace(report, out / "test_trace.png")]
    if any(r.get("tau") for r in _main_rows(report)):
        paths.append(plot_thresholds(report, out / "thresholds.png"))
    if any(r.get("pl_CF1") is not None for r in _main_rows(report)):
        paths.append(plot_pseudo_label_quality(report, out / "pseudo_label_quality.png"))
    return paths


def plot_summary_bars(summary: List[dict], path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [s["variant"] for s in summary]
        x = np.arange(len(names))
        ax.bar(x, [s["mAP_mean"] for s in summary], yerr=[s["mAP_std"] for s in summary],
               capsize=3, color="#4c72b0")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("test mAP")
        lo = min(s["mAP_mean"] - s["mAP_std"] for s in summary)
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        if title:
            ax.set_title(title)
        return _save(fig, Path(path))


def plot_pl_traces(rows: List[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by_variant = {}
        for r in rows:
            tr = [v for v in r["pl_CF1_trace"] if v is not None]
            if tr:
                by_variant.setdefault(r["variant"], []).append(tr)
        for name, traces in by_variant.items():
            n = min(len(t) for t in traces)
            mean = np.mean([t[:n] for t in traces], axis=0)
            ax.plot(np.arange(1, n + 1), mean, label=name)
        ax.set_xlabel("main epoch")
        ax.set_ylabel("pseudo-label CF1 (seed mean)")
        if by_variant:
            ax.legend(frameon=False)
        return _save(fig, Path(path))


def render_sweep(result: dict, out_dir) -> List[Path]:
    out = Path(out_dir)
    paths = [plot_summary_bars(result["summary"], out / "summary_mAP.png", result.get("name", ""))]
    if any(r["pl_CF1_trace"] for r in result["rows"]):
        paths.append(plot_pl_traces(result["rows"], out / "pseudo_label_CF1.png"))
    return paths
