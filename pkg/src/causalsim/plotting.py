"""Matplotlib renderings for the ``report`` command. Figures are written to files only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def error_cdf(rows, metric, path, title=None):
    """Empirical CDF of a per-pair error metric, one curve per simulator."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for sim in sorted({r["simulator"] for r in rows}):
        v = np.sort([float(r[metric]) for r in rows if r["simulator"] == sim and r.get(metric) not in (None, "")])
        if v.size:
            ax.step(v, np.arange(1, v.size + 1) / v.size, where="post", label=sim)
    ax.set_xlabel(metric.replace("_", " "))
    ax.set_ylabel("CDF over (source, target) pairs")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def frontier(points, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.array([p["stall_rate"] for p in points]) * 100
    y = np.array([p["mean_bitrate"] for p in points])
    on = np.array([bool(p["on_frontier"]) for p in points])
    ax.scatter(x[~on], y[~on], c="0.6", label="dominated")
    order = np.argsort(x[on])
    ax.plot(x[on][order], y[on][order], "o-", label="frontier")
    ax.set_xlabel("stall rate (%)")
    ax.set_ylabel("mean bitrate (Mbps)")
    ax.legend()
    return _save(fig, path)


def validation_vs_test(points, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([p["validation"] for p in points], [p["test"] for p in points])
    ax.set_xlabel("validation metric")
    ax.set_ylabel("test metric")
    return _save(fig, path)
