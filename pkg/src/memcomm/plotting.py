"""PNG figures written next to the CSV tables the CLI emits."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.figsize": (5.0, 3.4), "figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3,
         "font.size": 9, "legend.fontsize": 8, "savefig.bbox": "tight"}


def figure_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _save(fig, csv_path) -> Path:
    out = figure_path(csv_path)
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_accuracy_rows(rows, csv_path, title: str = "") -> Path:
    """Mean accuracy (over seeds) against SNR, one line per (strategy, budget)."""
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.snr_db is not None:
            groups[(r.strategy, r.budget)][r.snr_db].append(r.accuracy)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (strategy, budget), by_snr in sorted(groups.items()):
            snrs = sorted(by_snr)
            ax.plot(snrs, [np.mean(by_snr[s]) for s in snrs], marker="o", label=f"{strategy} ({budget} sym)")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("answer accuracy")
        ax.set_ylim(0, 1.02)
        if title:
            ax.set_title(title)
        if groups:
            ax.legend(loc="lower right")
        return _save(fig, csv_path)


def plot_symbol_table(rows: list[dict], snr_grid, csv_path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in rows:
            ax.plot(list(snr_grid), [r[s] for s in snr_grid], marker="s", label=r["method"])
        ax.set_yscale("log")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("symbols per sentence")
        ax.legend(loc="upper left", bbox_to_anchor=(1.01, 1.0))
        return _save(fig, csv_path)


def plot_plan(rows: list[dict], csv_path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        snr = [r["snr_db"] for r in rows]
        real = np.array([r["real_length"] for r in rows], dtype=float)
        ax.plot(snr, np.where(np.isfinite(real), real, np.nan), label="unrounded")
        ax.step(snr, [r["planned_length"] for r in rows], where="mid", label="planned")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("symbols per sentence")
        ax.legend()
        return _save(fig, csv_path)
