"""Sharpness-aware search directions.

The ascent perturbation, the perturbed (SAM) gradient, the orthogonal
decomposition used by the gradient-surgery variant, and the parameter
update.  All operations act on flat parameter vectors and never mutate
their inputs.  With alpha = 0 the direction is the plain SAM direction;
with rho = alpha = 0 it reduces bit-for-bit to minibatch SGD.
"""

from dataclasses import dataclass, replace

import numpy as np

from .ensemble import as_param_vector


@dataclass(frozen=True)
class SamConfig:
    """Direction and update hyperparameters.

    rho is the ascent radius, alpha the weight on the orthogonal
    gradient component (0 disables the surgery term).  `u` is the
    fallback perturbation used when the gradient norm is at or below
    `zero_grad_threshold`; it must satisfy ||u|| <= rho and defaults to
    no perturbation.  `base_update` selects plain SGD steps or
    Adam-style moment steps on the negated direction.
    """

    rho: float = 0.0
    alpha: float = 0.0
    u: np.ndarray | None = None
    zero_grad_threshold: float = 1e-12
    base_update: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.zero_grad_threshold <= 0:
            raise ValueError("zero_grad_threshold must be positive")
        if self.base_update not in ("sgd", "adam"):
            raise ValueError(f"unknown base_update {self.base_update!r}")
        if self.u is not None:
            u = np.asarray(self.u, dtype=float)
            if float(np.linalg.norm(u)) > self.rho * (1 + 1e-12):
                raise ValueError("fallback perturbation u must satisfy ||u|| <= rho")
            object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class Decomposition:
    """Split of a vector into components along and orthogonal to a reference."""

    parallel: np.ndarray
    perpendicular: np.ndarray


def perturbation(grad, rho, u=None, threshold=1e-12):
    """Ascent offset rho * g / ||g||, or the fallback u at degenerate g."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    g = np.asarray(grad, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return (rho / norm) * g
    if u is None:
        return np.zeros_like(g)
    return np.asarray(u, dtype=float)


def sam_gradient(ens, x, indices, cfg):
    """Gradient at the ascent point x + rho g/||g||.

    `indices` selects the mini-batch; None evaluates on the full
    ensemble, giving the deterministic perturbed gradient.  Both the
    perturbation and the returned gradient use the same batch.
    """
    x = as_param_vector(x, ens.d)
    grad_at = (lambda p: ens.full_grad(p)) if indices is None else (lambda p: ens.batch_grad(p, indices))
    g = grad_at(x)
    eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
    return grad_at(x + eps)


def decompose(v, reference, threshold=1e-12):
    """Orthogonal projection of v onto the reference direction.

    Returns exact complements: parallel + perpendicular == v.  A
    degenerate reference (norm <= threshold) yields parallel = 0 and
    perpendicular = v.
    """
    v = np.asarray(v, dtype=float)
    r = np.asarray(reference, dtype=float)
    if v.shape != r.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {r.shape}")
    rr = float(r @ r)
    if np.sqrt(rr) <= threshold:
        return Decomposition(np.zeros_like(v), v.copy())
    parallel = (float(v @ r) / rr) * r
    return Decomposition(parallel, v - parallel)


def direction_parts(ens, x, indices, cfg):
    """Mini-batch gradient, its SAM counterpart, the orthogonal residual
    of the former against the latter, and the search direction d."""
    x = as_param_vector(x, ens.d)
    grad_at = (lambda p: ens.full_grad(p)) if indices is None else (lambda p: ens.batch_grad(p, indices))
    g = grad_at(x)
    eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
    g_sam = grad_at(x + eps)
    if cfg.alpha == 0.0:
        perp = np.zeros_like(g)
        d = -g_sam
    else:
        perp = decompose(g, g_sam, cfg.zero_grad_threshold).perpendicular
        d = -(g_sam - cfg.alpha * perp)
    return g, g_sam, perp, d


def direction(ens, x, indices, cfg):
    """Search direction d = -(SAM gradient - alpha * orthogonal residual)."""
    return direction_parts(ens, x, indices, cfg)[3]


@dataclass
class AdamState:
    """First/second moment accumulators for the adam-style base update."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(d), 0)


def step(x, d, eta, cfg, state=None):
    """Apply one update along direction d with step size eta.

    sgd-style returns x + eta d.  adam-style treats -d as the gradient
    estimate, updates bias-corrected moments, and applies decoupled
    weight decay; returns the new point and the advanced state.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    if cfg.base_update == "sgd":
        if cfg.weight_decay:  # guarded so the default path is exactly x + eta d
            d = d - cfg.weight_decay * x
        return x + eta * d, state
    if state is None:
        state = AdamState.zeros(x.size)
    g = -d
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    t = state.t + 1
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    x_new = x - eta * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * x)
    return x_new, AdamState(m, v, t)


def config_with(cfg, **kwargs):
    """Copy of a SamConfig with selected fields replaced."""
    return replace(cfg, **kwargs)
