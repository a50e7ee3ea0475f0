"""Vector-graphics rendering of aggregate run data.

Figures are a reporting surface only: every number they show comes from the
delimited files written alongside them, and nothing downstream reads pixels.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_mean_band(path, curves, xlabel, ylabel, title=None, logy=True):
    """One line per labeled curve with a one-standard-deviation band.

    curves maps label -> (x, mean, std); std may be None for single runs.
    """
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (x, mean, std) in curves.items():
        x = np.asarray(x, dtype=float)
        mean = np.asarray(mean, dtype=float)
        (line,) = ax.plot(x, mean, label=label, linewidth=1.4)
        if std is not None:
            std = np.asarray(std, dtype=float)
            ax.fill_between(x, mean - std, mean + std, alpha=0.2, color=line.get_color())
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_coverage(path, k_cal, coverage, eta, title=None):
    """Coverage against the calibration multiplier, with the 1 - eta target."""
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    ax.plot(k_cal, coverage, marker="o", linewidth=1.2)
    ax.axhline(1.0 - eta, linestyle="--", linewidth=1.0, label=f"target {1.0 - eta:g}")
    ax.set_xlabel("calibration multiplier")
    ax.set_ylabel("empirical coverage")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
