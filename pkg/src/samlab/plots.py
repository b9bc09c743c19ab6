"""Figure rendering for run reports.

Everything draws through the Agg backend and writes straight to files,
so reports work headless.  Each function returns the path it wrote.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import RunAggregate, RunTrace


def _series(obj):
    """(columns, band) where band is (lo, hi) dicts for aggregates."""
    if isinstance(obj, RunAggregate):
        return obj.mean, (obj.min, obj.max)
    if isinstance(obj, RunTrace):
        cols = {name: obj.column(name) for name in
                ("step", "epoch", "batch_size", "lr", "minibatch_loss",
                 "full_loss", "sam_grad_norm", "noise_norm", "noise_mean", "noise_se")}
        return cols, None
    raise TypeError("expected a RunTrace or RunAggregate")


def _masked(steps, values):
    keep = np.isfinite(values)
    return steps[keep], values[keep]


def _save(fig, path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_run(obj, path, epsilon=None, title=None):
    """Four-panel training report: losses, schedules, gradient norm, noise."""
    cols, band = _series(obj)
    steps = cols["step"]
    fig, axes = plt.subplots(2, 2, figsize=(11, 7.5))

    ax = axes[0, 0]
    ax.plot(steps, cols["minibatch_loss"], lw=0.6, alpha=0.55, label="minibatch loss")
    if band is not None:
        ax.fill_between(steps, band[0]["minibatch_loss"], band[1]["minibatch_loss"],
                        alpha=0.2, lw=0, label="seed min/max")
    fs, fv = _masked(steps, cols["full_loss"])
    if fs.size:
        ax.plot(fs, fv, "o-", ms=2.5, lw=1.2, label="full loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)

    ax = axes[0, 1]
    ax.step(steps, cols["lr"], where="post", color="tab:blue", label="learning rate")
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate", color="tab:blue")
    ax2 = ax.twinx()
    ax2.step(steps, cols["batch_size"], where="post", color="tab:orange", label="batch size")
    ax2.set_ylabel("batch size", color="tab:orange")

    ax = axes[1, 0]
    keep = np.isfinite(cols["sam_grad_norm"])
    gs, gv = steps[keep], cols["sam_grad_norm"][keep]
    if gs.size:
        ax.semilogy(gs, gv, "o-", ms=2.5, lw=1.2)
        if band is not None:
            ax.fill_between(gs, band[0]["sam_grad_norm"][keep],
                            band[1]["sam_grad_norm"][keep], alpha=0.2, lw=0)
    if epsilon:
        ax.axhline(epsilon, color="tab:red", ls="--", lw=1, label=f"target {epsilon:g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("full-ensemble SAM gradient norm")

    ax = axes[1, 1]
    keep = np.isfinite(cols["noise_norm"])
    ns = steps[keep]
    nv = cols["noise_norm"][keep] * cols["lr"][keep]  # eta-scaled, like the MC columns
    if ns.size:
        ax.semilogy(ns, np.maximum(nv, 1e-300), "o-", ms=2.5, lw=1.0,
                    label="single-batch η·noise norm")
    ms_, mv = _masked(steps, cols["noise_mean"])
    if ms_.size:
        _, sv = _masked(steps, cols["noise_se"])
        ax.errorbar(ms_, mv, yerr=2 * sv, fmt="s", ms=3, lw=1.0, capsize=2,
                    label="Monte-Carlo mean ± 2 SE")
    if ns.size or ms_.size:
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no noise diagnostics recorded",
                ha="center", va="center", transform=ax.transAxes, fontsize=9)
    ax.set_xlabel("step")
    ax.set_ylabel("η-scaled gradient-noise norm")

    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_scaling(batch_sizes, means, ses, fit, path, title=None):
    """Log-log noise-vs-batch-size scatter with the fitted power law."""
    b = np.asarray(batch_sizes, dtype=float)
    m = np.asarray(means, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if ses is not None:
        ax.errorbar(b, m, yerr=2 * np.asarray(ses, dtype=float), fmt="o",
                    ms=5, capsize=3, label="measured mean ± 2 SE")
    else:
        ax.plot(b, m, "o", ms=5, label="measured mean")
    intercept = float(np.mean(np.log(m) - fit.slope * np.log(b)))
    grid = np.geomspace(b.min(), b.max(), 64)
    ax.plot(grid, np.exp(intercept) * grid ** fit.slope, "--",
            label=f"fit slope {fit.slope:+.3f} (r²={fit.r_squared:.3f})")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("mean noise norm")
    ax.legend(fontsize=9)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_noise_vs_bound(steps, noise, bound, path, title=None):
    """Measured noise norms against the theoretical envelope."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.semilogy(steps, np.maximum(np.asarray(noise, float), 1e-300), "o-",
                ms=3, lw=1, label="measured noise norm")
    ax.semilogy(steps, np.maximum(np.asarray(bound, float), 1e-300), "--",
                lw=1.4, label="upper bound")
    ax.set_xlabel("step")
    ax.set_ylabel("noise norm")
    ax.legend(fontsize=9)
    if title:
        ax.set_title(title)
    return _save(fig, path)
