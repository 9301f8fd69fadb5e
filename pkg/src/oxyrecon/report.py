"""Figure rendering for the CLI report paths.

Every command that writes a delimited report can also render a companion
PNG next to it. All plotting goes through the Agg backend so the CLI works
headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_history(history, path):
    """Loss curves and nutrient-gradient variance traces per epoch."""
    epochs = sorted({row["epoch"] for row in history})

    def epoch_mean(key):
        out = []
        for e in epochs:
            vals = [r[key] for r in history if r["epoch"] == e and np.isfinite(r[key])]
            out.append(np.mean(vals) if vals else np.nan)
        return np.array(out)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, epoch_mean("train_loss"), label="train")
    ax1.plot(epochs, epoch_mean("val_loss"), label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("MSE (umol/kg)^2")
    ax1.set_yscale("log")
    ax1.legend()

    for key, label in (("grad_N_var", "var dDO/dN"), ("grad_P_var", "var dDO/dP")):
        trace = epoch_mean(key)
        if np.any(np.isfinite(trace)):
            ax2.plot(epochs, trace, label=label)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("gradient variance")
    ax2.set_yscale("log")
    ax2.legend()
    return _save(fig, path)


def plot_metrics_groups(reports, key, path, metric="mape"):
    """One metric across a grouping key (year, depth, area)."""
    pairs = sorted((r.group[key], getattr(r, metric)) for r in reports)
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(key)
    ax.set_ylabel(metric.upper())
    return _save(fig, path)


def plot_omz_series(years, rho, path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(years, 100.0 * np.asarray(rho), marker="o", color="tab:orange")
    ax.set_xlabel("year")
    ax.set_ylabel("OMZ area fraction (%)")
    return _save(fig, path)


def plot_zone_map(nodes, zone_ids, path, depth_index=0):
    """Horizontal map of zone labels at one depth level."""
    sel = nodes[:, 2] == depth_index
    fig, ax = plt.subplots(figsize=(6, 4))
    sc = ax.scatter(nodes[sel, 0], nodes[sel, 1], c=zone_ids[sel], s=18,
                    cmap="tab10", marker="s")
    ax.set_xlabel("lon index")
    ax.set_ylabel("lat index")
    fig.colorbar(sc, ax=ax, label="zone")
    return _save(fig, path)


def plot_crossfold(rows, path):
    """Per-fold MAPE bars with the averaged value overlaid."""
    folds = [r for r in rows if r["row"] != "average"]
    avg = next(r for r in rows if r["row"] == "average")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["row"] for r in folds], [r["mape"] for r in folds], color="tab:blue")
    ax.axhline(avg["mape"], color="tab:red", linestyle="--",
               label=f"average {avg['mape']:.2f}")
    ax.set_ylabel("MAPE (%)")
    ax.legend()
    return _save(fig, path)
