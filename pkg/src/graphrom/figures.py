"""Matplotlib rendering of the diagnostic CSV outputs.

Each render function takes the same data the CSV exporters consume and writes
a PNG next to the delimited file, so every report directory carries both the
raw numbers and a quick-look figure.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_error_curves(report, path):
    """Relative error versus time, one line per simulation."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for sid in np.unique(report.sim_ids):
        mask = report.sim_ids == sid
        order = np.argsort(report.times[mask])
        ax.semilogy(report.times[mask][order], report.eps_rel[mask][order],
                    marker=".", label=f"sim {int(sid)}")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\varepsilon_{rel}$")
    ax.set_title(f"max {report.eps_max:.3e}, mean {report.eps_mean:.3e}")
    if len(np.unique(report.sim_ids)) <= 10:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_latent_trajectories(trajectories, sim_ids, path):
    """Latent components versus time, one panel per component."""
    n = trajectories[0].states.shape[1]
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    for j in range(n):
        ax = axes[0, j]
        for sid, traj in zip(sim_ids, trajectories):
            ax.plot(traj.times, traj.states[:, j], lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel(f"$s_{{{j + 1}}}$")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_phase_portrait(trajectories, sim_ids, dim_i, dim_j, path):
    """Trajectories in the (s_i, s_j) plane; triangle marks the initial condition."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for sid, traj in zip(sim_ids, trajectories):
        x, y = traj.states[:, dim_i], traj.states[:, dim_j]
        ax.plot(x, y, lw=0.8)
        ax.plot(x[0], y[0], marker="^", color="k", ms=7)
    ax.set_xlabel(f"$s_{{{dim_i + 1}}}$")
    ax.set_ylabel(f"$s_{{{dim_j + 1}}}$")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_diagram(report, path):
    """Bifurcation diagram: QoI versus mu, with the estimated critical point."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(report.mus, report.qois, marker="o")
    if report.mu_star is not None:
        ax.axvline(report.mu_star, color="r", ls="--",
                   label=rf"$\hat\mu^* = {report.mu_star:.4g}$")
        ax.legend()
    ax.set_xlabel(r"$\mu$")
    ax.set_ylabel("QoI")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_loss_history(history, path):
    """Total/data/regularization loss versus epoch on a log scale."""
    arr = np.asarray([(e, lt, le, lr) for e, lt, le, lr in history])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(arr[:, 0], arr[:, 1], label="total")
    ax.semilogy(arr[:, 0], arr[:, 2], label="data")
    ax.semilogy(arr[:, 0], arr[:, 3], label="regularization")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
