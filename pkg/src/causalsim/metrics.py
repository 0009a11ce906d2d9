"""Accuracy and streaming-quality metrics."""

from __future__ import annotations

import numpy as np


def emd(p, q):
    """Earth mover's distance between two 1-D empirical distributions.

    Integrates |F_p - F_q| exactly over the merged breakpoints.
    """
    p = np.sort(np.asarray(p, dtype=np.float64).ravel())
    q = np.sort(np.asarray(q, dtype=np.float64).ravel())
    if p.size == 0 or q.size == 0:
        raise ValueError("emd needs non-empty sample sets")
    grid = np.concatenate([p, q])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fp = np.searchsorted(p, grid[:-1], side="right") / p.size
    fq = np.searchsorted(q, grid[:-1], side="right") / q.size
    return float(np.sum(np.abs(fp - fq) * widths))


def mape(truth, pred):
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise ValueError("mape inputs differ in length")
    if np.any(truth == 0):
        raise ValueError("mape undefined for zero truth entries")
    return float(100.0 * np.mean(np.abs(pred - truth) / np.abs(truth)))


def mse(x, y):
    """Squared Euclidean distance ||x - y||^2."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("mse inputs differ in length")
    return float(np.sum((x - y) ** 2))


def pcc(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("pcc inputs differ in length")
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if den == 0:
        raise ValueError("pcc undefined for zero-variance input")
    return float(np.clip(np.sum(xc * yc) / den, -1.0, 1.0))


def rebuffers(buffers, download_times):
    return np.maximum(0.0, np.asarray(download_times, dtype=np.float64) - np.asarray(buffers, dtype=np.float64))


def stall_rate(traj, chunk_seconds=4.0):
    """Fraction of session time spent stalled: rebuffer / (playback + rebuffer)."""
    stall = rebuffers(traj.obs[:, 0], traj.traces[:, 1]).sum()
    return float(stall / (traj.horizon * chunk_seconds + stall))


def qoe(traj, ladder, rebuffer_penalty=4.3):
    """Per-step QoE (bitrate minus switching minus rebuffer penalty) and its mean."""
    q = np.asarray(ladder, dtype=np.float64)[traj.actions]
    prev = np.concatenate([q[:1], q[:-1]])
    per_step = q - np.abs(q - prev) - rebuffer_penalty * rebuffers(traj.obs[:, 0], traj.traces[:, 1])
    return per_step, float(per_step.mean())


def bootstrap_ci(values, stat=np.mean, n_resamples=1000, level=0.95, seed=0):
    """Percentile bootstrap over independent units (e.g. trajectories)."""
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(values), size=(n_resamples, len(values)))
    stats = np.array([stat(values[i]) for i in idx])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    return float(stat(values)), float(lo), float(hi)
