"""Render figures from the harness's CSV outputs.

Every plot here is derived from the delimited files alone, so an output
directory can be re-rendered at any time (``fedsig plot --out <dir>``).
Figures are reports; the CSV/JSON files remain the canonical results.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["render_experiment"]

_RC = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.titlesize": 10,
}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _sorted_values(values):
    return sorted(set(values), key=float)


def _plot_kernel_sweep(out_dir: Path) -> list[Path]:
    rows = _read_csv(out_dir / "kernel_sweep.csv")
    kernels = _sorted_values(r["kernel_size"] for r in rows)
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6))
    for ax, metric in zip(axes, ("eer", "accuracy")):
        per_kernel = defaultdict(list)
        for r in rows:
            per_kernel[r["kernel_size"]].append(float(r[metric]))
        xs = [float(k) for k in kernels]
        for k in kernels:
            ax.plot([float(k)] * len(per_kernel[k]), per_kernel[k], "o", color="tab:gray", ms=3, alpha=0.6)
        medians = [sorted(per_kernel[k])[len(per_kernel[k]) // 2] for k in kernels]
        ax.plot(xs, medians, "-o", color="tab:blue", label="median")
        ax.set_xlabel("kernel size")
        ax.set_ylabel(metric.upper() if metric == "eer" else metric)
        ax.legend()
    path = out_dir / "kernel_sweep.png"
    _save(fig, path)
    return [path]


def _plot_study_boxes(out_dir: Path) -> list[Path]:
    rows = _read_csv(out_dir / "study.csv")
    values = _sorted_values(r["param_value"] for r in rows)
    written = []
    for metric in ("eer", "accuracy"):
        groups = [[float(r[metric]) for r in rows if r["param_value"] == v] for v in values]
        fig, ax = plt.subplots()
        ax.boxplot(groups, tick_labels=values)
        ax.set_xlabel("parameter value")
        ax.set_ylabel(metric.upper() if metric == "eer" else metric)
        path = out_dir / f"boxplot_{metric}.png"
        _save(fig, path)
        written.append(path)
    return written


def _plot_losses(out_dir: Path) -> list[Path]:
    rows = _read_csv(out_dir / "losses.csv")
    values = _sorted_values(r["param_value"] for r in rows)
    fig, ax = plt.subplots()
    for v in values:
        per_iter = defaultdict(list)
        for r in rows:
            if r["param_value"] == v:
                per_iter[int(r["iteration"])].append(float(r["loss"]))
        iters = sorted(per_iter)
        ax.plot(iters, [sum(per_iter[i]) / len(per_iter[i]) for i in iters], label=str(v))
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean training loss")
    ax.legend(title="value")
    path = out_dir / "loss_curves.png"
    _save(fig, path)
    return [path]


def _plot_roc_family(out_dir: Path, paths: list[Path], name: str) -> list[Path]:
    fig, ax = plt.subplots()
    for path in sorted(paths):
        rows = _read_csv(path)
        far = [float(r["far"]) for r in rows]
        frr = [float(r["frr"]) for r in rows]
        tpr = [1.0 - v for v in frr]
        label = path.stem.split("_", 2)[-1] if "_" in path.stem else path.stem
        ax.plot(far, tpr, label=label)
    ax.plot([0, 1], [0, 1], "--", color="gray", lw=0.8)
    ax.set_xlabel("false acceptance rate")
    ax.set_ylabel("true acceptance rate")
    if len(paths) > 1:
        ax.legend(title="value")
    out = out_dir / name
    _save(fig, out)
    return [out]


def _plot_score_scatter(out_dir: Path) -> list[Path]:
    rows = _read_csv(out_dir / "scores.csv")
    users = sorted({int(r["user_id"]) for r in rows})
    row_of = {uid: i for i, uid in enumerate(users)}
    fig, ax = plt.subplots(figsize=(6.0, max(2.5, 0.22 * len(users) + 1)))
    for label, color, marker, text in ((1, "tab:blue", "^", "genuine"), (0, "tab:red", "v", "forged")):
        xs = [float(r["score"]) for r in rows if int(r["label"]) == label]
        ys = [row_of[int(r["user_id"])] for r in rows if int(r["label"]) == label]
        ax.scatter(xs, ys, c=color, marker=marker, s=14, label=text, alpha=0.8)
    ax.set_yticks(range(len(users)), [str(u) for u in users])
    ax.set_xlabel("verification score")
    ax.set_ylabel("user")
    ax.legend(loc="upper center", ncol=2)
    path = out_dir / "scores.png"
    _save(fig, path)
    return [path]


def render_experiment(out_dir: str | Path) -> list[Path]:
    """Render every figure the directory's CSVs support; returns the paths."""
    out_dir = Path(out_dir)
    written: list[Path] = []
    with plt.rc_context(_RC):
        if (out_dir / "kernel_sweep.csv").exists():
            written += _plot_kernel_sweep(out_dir)
        if (out_dir / "study.csv").exists():
            written += _plot_study_boxes(out_dir)
        if (out_dir / "losses.csv").exists():
            written += _plot_losses(out_dir)
        family = [p for p in out_dir.glob("roc_*.csv")]
        if family:
            written += _plot_roc_family(out_dir, family, "roc_curves.png")
        if (out_dir / "roc.csv").exists():
            written += _plot_roc_family(out_dir, [out_dir / "roc.csv"], "roc.png")
        if (out_dir / "scores.csv").exists():
            written += _plot_score_scatter(out_dir)
    return written
