"""Render figures from a run directory's CSV outputs.

Reads whatever delimited outputs a run left behind (``metrics.csv``,
``gates_epochN.csv``, ``sweep_summary.csv``) and writes PNG figures next to
them: loss curves, the remaining-MACs ratio over epochs, the evolving gate
histogram panels, and sweep scatter plots.  Everything here is offline; the
training loop itself never imports matplotlib.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError

__all__ = ["render_report"]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _plot_metrics(out: Path, rows) -> list[str]:
    epochs = [int(r["epoch"]) for r in rows]
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [float(r["train_loss"]) for r in rows], label="train loss")
    ax.plot(epochs, [float(r["val_loss"]) for r in rows], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=150)
    plt.close(fig)
    written.append("loss_curves.png")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [float(r["flops_ratio"]) for r in rows], color="tab:red")
    ax.set_xlabel("epoch")
    ax.set_ylabel("remaining MACs ratio")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out / "flops_ratio.png", dpi=150)
    plt.close(fig)
    written.append("flops_ratio.png")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [int(r["zero_gates"]) for r in rows], color="tab:purple")
    ax.set_xlabel("epoch")
    ax.set_ylabel("exact-zero gates")
    fig.tight_layout()
    fig.savefig(out / "zero_gates.png", dpi=150)
    plt.close(fig)
    written.append("zero_gates.png")
    return written


def _plot_gate_histograms(out: Path, hist_files) -> list[str]:
    panels = []
    for path in hist_files:
        epoch = int(re.search(r"gates_epoch(\d+)\.csv$", path.name).group(1))
        zeros = 0
        lows, counts = [], []
        for r in _read_csv(path):
            if r["bin_lo"] == "exact_zero":
                zeros = int(r["count"])
            else:
                lows.append(float(r["bin_lo"]))
                counts.append(int(r["count"]))
        panels.append((epoch, zeros, np.array(lows), np.array(counts)))
    panels.sort()
    n = len(panels)
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.4 * rows), squeeze=False)
    width = panels[0][2][1] - panels[0][2][0] if len(panels[0][2]) > 1 else 0.05
    for i, (epoch, zeros, lows, counts) in enumerate(panels):
        ax = axes[i // cols][i % cols]
        total = max(1, zeros + counts.sum())
        ax.bar(lows, counts / total, width=width, align="edge", color="tab:blue")
        ax.bar([-width], [zeros / total], width=width, align="edge", color="tab:red")
        ax.set_title(f"epoch {epoch}", fontsize=9)
        ax.set_xlim(-1.5 * width, 1.0)
        ax.set_ylim(0, 0.5)  # truncated so small bins stay visible
        ax.tick_params(labelsize=7)
    for j in range(n, rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.suptitle("gate value density (red bar = exact zeros)", fontsize=10)
    fig.tight_layout()
    fig.savefig(out / "gate_histograms.png", dpi=150)
    plt.close(fig)
    return ["gate_histograms.png"]


def _plot_sweep(out: Path, rows) -> list[str]:
    written = []
    lam = [float(r["lambda"]) for r in rows]
    ratio = [float(r["flops_ratio"]) for r in rows]
    sup = [float(r["supernet_acc"]) for r in rows]
    fin = [float(r["finetuned_acc"]) for r in rows]

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(lam, ratio, "o-")
    ax.set_xlabel("lambda")
    ax.set_ylabel("final MACs ratio")
    if len(set(lam)) > 1 and min(lam) > 0:
        ax.set_xscale("log")
    fig.tight_layout()
    fig.savefig(out / "sweep_ratio.png", dpi=150)
    plt.close(fig)
    written.append("sweep_ratio.png")

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(sup, fin)
    lo = min(sup + fin) - 0.02
    hi = max(sup + fin) + 0.02
    ax.plot([lo, hi], [lo, hi], "k--", linewidth=0.8)
    ax.set_xlabel("super-net accuracy")
    ax.set_ylabel("final sub-net accuracy")
    fig.tight_layout()
    fig.savefig(out / "sweep_consistency.png", dpi=150)
    plt.close(fig)
    written.append("sweep_consistency.png")
    return written


def render_report(run_dir) -> list[str]:
    """Render every figure the directory's CSVs support; returns filenames."""
    out = Path(run_dir)
    if not out.is_dir():
        raise ConfigError(f"report: {out} is not a directory")
    written: list[str] = []
    metrics = out / "metrics.csv"
    if metrics.exists():
        written += _plot_metrics(out, _read_csv(metrics))
    hist_files = sorted(out.glob("gates_epoch*.csv"))
    if hist_files:
        written += _plot_gate_histograms(out, hist_files)
    sweep = out / "sweep_summary.csv"
    if sweep.exists():
        written += _plot_sweep(out, _read_csv(sweep))
    if not written:
        raise ConfigError(
            f"report: no metrics.csv, gates_epochN.csv or sweep_summary.csv under {out}"
        )
    return written
