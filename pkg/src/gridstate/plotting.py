"""Figures rendered from the harness CSVs (optional; needs matplotlib)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import CaseError
from .experiments import read_csv


def _plt():
    try:
        import matplotlib
    except ImportError:
        raise CaseError("plotting needs matplotlib; install the 'plot' extra") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=120, metadata={"Software": None})
    fig.clf()
    return path


def plot_sweep(table_csv, out_png) -> Path:
    plt = _plt()
    rows = read_csv(table_csv)
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in [c for c in rows[0] if c.endswith("_mse")]:
        ax.semilogy(x, [r[col] for r in rows], marker="o", label=col[:-4].upper())
    ax.semilogy(x, [r["crlb"] for r in rows], "k--", label="CRLB")
    ax.set_xticks(x, labels)
    ax.set_xlabel("measurement types included")
    ax.set_ylabel("MSE")
    ax.legend()
    return _save(fig, out_png)


def plot_baddata(wide_csv, out_png) -> Path:
    plt = _plt()
    rows = read_csv(wide_csv)
    methods = [c for c in rows[0] if c != "scenario"]
    x = np.arange(len(rows))
    w = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, m in enumerate(methods):
        ax.bar(x + i * w, [r[m] for r in rows], w, label=m)
    ax.set_xticks(x + 0.4 - w / 2, [r["scenario"] for r in rows])
    ax.set_ylabel("mean state error")
    ax.legend()
    return _save(fig, out_png)


def plot_trace(trace_csv, out_png, columns=("e_kc", "e_ko")) -> Path:
    """Per-area error curves against the iteration index, one panel per column."""
    plt = _plt()
    rows = read_csv(trace_csv)
    cols = [c for c in columns if c in rows[0]]
    areas = sorted({r["area"] for r in rows})
    fig, axes = plt.subplots(1, len(cols), figsize=(5 * len(cols), 4), squeeze=False)
    for ax, col in zip(axes[0], cols):
        if len(areas) > 12:
            its = sorted({r["iter"] for r in rows})
            mean = [np.mean([r[col] for r in rows if r["iter"] == i]) for i in its]
            ax.semilogy(its, mean, label="average")
        else:
            for a in areas:
                pts = [(r["iter"], r[col]) for r in rows if r["area"] == a]
                ax.semilogy(*zip(*pts), label=f"area {a + 1}")
        ax.set_xlabel("iteration")
        ax.set_ylabel(col)
        ax.legend()
    return _save(fig, out_png)


def plot_tracking(track_csv, out_png) -> Path:
    plt = _plt()
    rows = read_csv(track_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for m in dict.fromkeys(r["method"] for r in rows):
        pts = [(r["t"], r["state_error"]) for r in rows if r["method"] == m]
        ax.plot(*zip(*pts), label=m)
    ax.set_xlabel("t")
    ax.set_ylabel("state error")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, out_png)
