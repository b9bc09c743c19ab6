"""Search-direction noise, gradient-bound tracking, and sharpness.

The noise of a step is the gap between the deterministic perturbed
gradient (computed on all n samples) and its mini-batch counterpart,
plus the alpha-weighted orthogonal residual the direction adds:

    omega = [full SAM grad - batch SAM grad] + alpha * v_perp.

Measuring it costs a full-gradient evaluation, so the harness samples
it on a cadence (default every ceil(T/200) steps) rather than per step.
Also here: running maxima of the gradient norms the convergence theory
assumes bounded, and the worst-case box-constrained sharpness metric
evaluated on the full ensemble.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .ensemble import as_param_vector
from .sam import decompose, perturbation, sam_gradient


def default_cadence(total_steps):
    """Diagnostic sampling interval: about 200 samples per run."""
    return max(1, math.ceil(total_steps / 200))


def _batch_indices(batch):
    return batch.indices if hasattr(batch, "indices") else np.asarray(batch)


@dataclass(frozen=True)
class NoiseSample:
    """One measurement of the search-direction noise at a point."""

    omega: np.ndarray
    omega_hat: np.ndarray
    norm: float
    eta_times_norm: float


def noise_sample(ens, x, batch, cfg, eta):
    """Noise of one mini-batch direction at x under the given config.

    omega_hat is the full-vs-batch SAM gradient gap; omega adds the
    alpha-weighted perpendicular component of the mini-batch gradient.
    """
    x = as_param_vector(x, ens.d)
    idx = _batch_indices(batch)
    full_sam = sam_gradient(ens, x, None, cfg)
    g = ens.batch_grad(x, idx)
    eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
    batch_sam = ens.batch_grad(x + eps, idx)
    omega_hat = full_sam - batch_sam
    if cfg.alpha == 0.0:
        omega = omega_hat
    else:
        perp = decompose(g, batch_sam, cfg.zero_grad_threshold).perpendicular
        omega = omega_hat + cfg.alpha * perp
    norm = float(np.linalg.norm(omega))
    return NoiseSample(omega, omega_hat, norm, float(eta) * norm)


def mc_noise_norm(ens, x, b, cfg, eta, trials, seed=0):
    """Monte-Carlo mean and standard error of eta * ||omega|| at fixed x.

    Batches of size b are i.i.d. uniform with replacement; b = n uses
    the full index set, which is the deterministic case the noise
    vanishes in.  The full-side SAM gradient is computed once.
    """
    if trials < 100:
        raise ValueError("mc_noise_norm needs at least 100 trials")
    if not 1 <= b <= ens.n:
        raise ValueError(f"batch size {b} outside [1, {ens.n}]")
    x = as_param_vector(x, ens.d)
    gen = rngmod.stream(seed, "mc-noise")
    full_sam = sam_gradient(ens, x, None, cfg)
    full_idx = np.arange(ens.n)
    vals = np.empty(trials)
    for k in range(trials):
        idx = full_idx if b == ens.n else gen.integers(0, ens.n, size=b)
        g = ens.batch_grad(x, idx)
        eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
        batch_sam = ens.batch_grad(x + eps, idx)
        omega = full_sam - batch_sam
        if cfg.alpha != 0.0:
            omega = omega + cfg.alpha * decompose(g, batch_sam, cfg.zero_grad_threshold).perpendicular
        vals[k] = eta * np.linalg.norm(omega)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials))


@dataclass(frozen=True)
class GradBoundEstimates:
    """Running maxima of the gradient norms the eta/rho windows assume
    bounded by G (all four) and G_perp (the orthogonal residual)."""

    G_hat: float = 0.0
    G_perp_hat: float = 0.0


def grad_bound_update(est, ens, x, batch, cfg):
    """Fold one (x, batch) observation into the running maxima.

    The four norms: the full gradient at the batch ascent point, the
    batch SAM gradient, the full SAM gradient, and the orthogonal
    residual of the batch gradient.
    """
    x = as_param_vector(x, ens.d)
    idx = _batch_indices(batch)
    g = ens.batch_grad(x, idx)
    eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
    batch_sam = ens.batch_grad(x + eps, idx)
    full_at_ascent = ens.full_grad(x + eps)
    full_sam = sam_gradient(ens, x, None, cfg)
    perp = decompose(g, batch_sam, cfg.zero_grad_threshold).perpendicular
    perp_norm = float(np.linalg.norm(perp))
    g_hat = max(
        est.G_hat,
        float(np.linalg.norm(full_at_ascent)),
        float(np.linalg.norm(batch_sam)),
        float(np.linalg.norm(full_sam)),
        perp_norm,
    )
    return GradBoundEstimates(g_hat, max(est.G_perp_hat, perp_norm))


@dataclass(frozen=True)
class SharpnessSpec:
    """Box radius, per-coordinate scaling, and ascent-solver knobs."""

    radius: float = 2e-4
    scaling: np.ndarray | None = None
    ascent_steps: int = 20
    restarts: int = 5
    step_fraction: float = 0.25

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sharpness radius must be positive")
        if self.restarts < 1:
            raise ValueError("sharpness needs at least one restart")
        if self.ascent_steps < 0 or self.step_fraction <= 0:
            raise ValueError("invalid ascent parameters")


def adaptive_sharpness(ens, x, spec, seed=0):
    """Worst-case sharpness max f_S(x + delta) - f_S(x) over the box
    |delta_j| <= radius * c_j, approximated by sign-gradient ascent.

    Each iteration steps by step_fraction * radius * c in the gradient
    sign and clamps back to the box.  One restart starts at delta = 0
    (so the result is never negative), the others at random corners,
    each on its own seed-derived stream.  The returned value is a lower
    bound on the true maximum by construction.
    """
    x = as_param_vector(x, ens.d)
    if spec.scaling is None:
        c = np.ones(ens.d)
    else:
        c = np.asarray(spec.scaling, dtype=float)
        if c.shape != (ens.d,) or np.any(c <= 0):
            raise ValueError("scaling must be a positive vector of length d")
    box = spec.radius * c
    step = spec.step_fraction * spec.radius * c
    base = ens.full_value(x)
    best = base
    for r in range(spec.restarts):
        if r == 0:
            delta = np.zeros(ens.d)
        else:
            gen = rngmod.substream(seed, "sharpness-restart", r)
            delta = box * (2.0 * gen.integers(0, 2, size=ens.d) - 1.0)
        best = max(best, ens.full_value(x + delta))
        for _ in range(spec.ascent_steps):
            grad = ens.full_grad(x + delta)
            delta = np.clip(delta + step * np.sign(grad), -box, box)
            best = max(best, ens.full_value(x + delta))
    return best - base
