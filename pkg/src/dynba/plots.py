"""Figures written next to the CSV reports (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"gt": "#2c3e50", "est": "#c0392b", "aux": "#2980b9"}


def _finish(fig, ax, path):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_trajectories(est_xyz, gt_xyz, path, axes=(0, 2)):
    """Top-down view of aligned estimated and ground-truth camera centers."""
    est_xyz, gt_xyz = np.asarray(est_xyz), np.asarray(gt_xyz)
    a, b = axes
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt_xyz[:, a], gt_xyz[:, b], "-", color=COLORS["gt"], label="ground truth")
    ax.plot(est_xyz[:, a], est_xyz[:, b], "--", color=COLORS["est"], label="estimate")
    ax.plot(gt_xyz[0, a], gt_xyz[0, b], "o", color=COLORS["gt"], ms=4)
    ax.set_xlabel("xyz"[a] + " [m]")
    ax.set_ylabel("xyz"[b] + " [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", frameon=False)
    return _finish(fig, ax, path)


def plot_frame_errors(frames, values, path, ylabel, label=None):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(frames, values, "-", color=COLORS["aux"], lw=1.2, label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    if label:
        ax.legend(loc="best", frameon=False)
    return _finish(fig, ax, path)


def plot_loss_curve(losses, path):
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.semilogy(np.arange(len(losses)), np.maximum(losses, 1e-300), color=COLORS["est"], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    return _finish(fig, ax, path)
