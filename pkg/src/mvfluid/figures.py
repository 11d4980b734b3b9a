"""Figure rendering for the CLI report paths.

Each command writes delimited output first; these helpers render the
same series to PNG files next to the CSVs.  All rendering goes through
the Agg backend so runs work headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, outdir: str, name: str) -> str:
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return name


def energy_figure(outdir: str, t, breakdowns) -> str:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4), constrained_layout=True)
    parts = {
        "kinetic": [b.kinetic for b in breakdowns],
        "exchange": [b.exchange for b in breakdowns],
        "penalty": [b.penalty for b in breakdowns],
        "elastic": [b.elastic for b in breakdowns],
    }
    for label, series in parts.items():
        ax1.plot(t, series, label=label)
    ax1.set_xlabel("t")
    ax1.set_ylabel("energy")
    ax1.legend(fontsize=8)
    free = np.array([b.free for b in breakdowns])
    ax2.semilogy(t, np.maximum(free, 1e-300))
    ax2.set_xlabel("t")
    ax2.set_ylabel("total (field-independent)")
    fig.suptitle("energy budget")
    return _save(fig, outdir, "energy.png")


def norms_figure(outdir: str, t, A, B) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    ax.semilogy(t, np.maximum(A, 1e-300), label="first-order aggregate")
    ax.semilogy(t, np.maximum(B, 1e-300), label="second-order aggregate")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    ax.set_title("strong-norm monitor")
    return _save(fig, outdir, "norms.png")


def optimize_figure(outdir: str, history: list[dict]) -> str:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4), constrained_layout=True)
    iters = [h["iter"] for h in history]
    ax1.semilogy(iters, [max(h["J"], 1e-300) for h in history], marker="o", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("J")
    key = "fixedpoint_residual" if "fixedpoint_residual" in history[0] else "grad_norm"
    ax2.semilogy(iters, [max(h[key], 1e-300) for h in history], marker="o", ms=3, color="tab:red")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel(key)
    fig.suptitle("optimization history")
    return _save(fig, outdir, "optimize.png")


def coil_intensity_figure(outdir: str, t, u: np.ndarray) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    for i in range(u.shape[0]):
        ax.plot(t, u[i], label=f"coil {i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("intensity")
    ax.legend(fontsize=8)
    ax.set_title("optimal coil intensities")
    return _save(fig, outdir, "coil_intensities.png")


def gradient_check_figure(outdir: str, rows: list[dict]) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    for r in rows:
        ax.loglog(r["eps"], np.maximum(r["remainder"], 1e-300), marker="o", ms=3,
                  label=f"dir {r['direction']} (slope {r['remainder_slope']:.2f})")
    eps = np.asarray(rows[0]["eps"])
    ref = rows[0]["remainder"][0] * (eps / eps[0]) ** 2
    ax.loglog(eps, np.maximum(ref, 1e-300), "k--", lw=0.8, label="slope 2")
    ax.set_xlabel("step size")
    ax.set_ylabel("Taylor remainder")
    ax.legend(fontsize=7)
    return _save(fig, outdir, "gradient_check.png")


def stability_figure(outdir: str, eps, weak_ratio, strong_ratio) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    ax.loglog(eps, weak_ratio, marker="o", ms=4, label="weak-norm ratio")
    ax.loglog(eps, strong_ratio, marker="s", ms=4, label="strong-norm ratio")
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("difference norm / control difference")
    ax.legend(fontsize=8)
    ax.set_title("stability probe")
    return _save(fig, outdir, "stability.png")


def field_figure(outdir: str, name: str, field, title: str = "") -> str:
    vals = field.values
    ncomp = vals.shape[0]
    fig, axes = plt.subplots(1, ncomp, figsize=(3.2 * ncomp, 3.0), constrained_layout=True)
    if ncomp == 1:
        axes = [axes]
    for c in range(ncomp):
        im = axes[c].imshow(vals[c], origin="lower", cmap="RdBu_r",
                            extent=(0, field.grid.lx, 0, field.grid.ly))
        fig.colorbar(im, ax=axes[c], shrink=0.85)
        axes[c].set_title(f"component {c + 1}", fontsize=8)
    if title:
        fig.suptitle(title)
    return _save(fig, outdir, name)
