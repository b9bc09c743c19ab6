"""Closed-form noise bounds, admissible step-size windows, and verdicts.

Calculators for the expected-noise upper bound (exact constants for
quadratic ensembles), the diagnostic lower bound, the log-log scaling
fit of noise against batch size, the learning-rate and ascent-radius
windows under which the minimum recorded full-SAM-gradient norm is
guaranteed to reach epsilon, and the verdict extractor that checks a
trace against that target.  Everything here is a pure function of the
supplied constants; nothing runs the optimizer.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class ProblemConstants:
    """Constants of one ensemble/optimizer pairing used by the bounds.

    sum_L is the sum of per-sample gradient Lipschitz constants, sigma
    the square root of the gradient-variance proxy, G / G_perp bounds on
    the gradient norms along the trajectory.  B and C cover the
    curvature-remainder terms; they vanish in the small-rho regime and
    default to 0.
    """

    n: int
    sum_L: float
    sigma: float
    rho: float
    alpha: float
    G: float = 0.0
    G_perp: float = 0.0
    B: float = 0.0
    C: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        for name in ("sum_L", "sigma", "rho", "G", "G_perp", "B", "C", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def theorem1_upper_bound(c, eta, b):
    """Upper bound on E[eta * ||omega||] at batch size b.

    Full batch leaves only the alpha term; below that the bound is
    eta * {sqrt(4 rho^2 (1/b^2 + 1/n^2) (sum L)^2 + 2 sigma^2 / b)
    + |alpha| G_perp}, non-increasing in b.
    """
    if not 1 <= b <= c.n:
        raise ValueError(f"batch size {b} outside [1, {c.n}]")
    alpha_term = abs(c.alpha) * c.G_perp
    if b == c.n:
        return eta * alpha_term
    stoch = math.sqrt(
        4.0 * c.rho ** 2 * (1.0 / b ** 2 + 1.0 / c.n ** 2) * c.sum_L ** 2
        + 2.0 * c.sigma ** 2 / b
    )
    return eta * (stoch + alpha_term)


THEOREM2_CASES = ("b_eq_n", "A_nonneg", "A_neg")


def theorem2_lower_bound(c, eta, b, case, c_t=1.0, d_t=1.0):
    """Diagnostic lower bound on E[eta * ||omega||] for the chosen branch.

    The branch constants c_t, d_t are existential (defaults 1); the
    b = n branch uses G_perp as the proxy for E||grad f_{S perp}||.
    Values may be negative, in which case the bound is vacuous; they are
    returned as-is and never gate anything.
    """
    if case not in THEOREM2_CASES:
        raise ValueError(f"case must be one of {THEOREM2_CASES}")
    if not 0 < c_t <= 1 or not 0 < d_t <= 1:
        raise ValueError("c_t and d_t must lie in (0, 1]")
    if not 1 <= b <= c.n:
        raise ValueError(f"batch size {b} outside [1, {c.n}]")
    if case == "b_eq_n":
        return eta * abs(c.alpha) * c.G_perp
    if case == "A_nonneg":
        return eta * (
            c_t * c.sigma / math.sqrt(b)
            - c.rho * (1.0 / b + 1.0 / c.n) * c.sum_L
            - abs(c.alpha) * c.G_perp
        )
    return eta * (
        c.rho * (d_t / b - 1.0 / c.n) * c.sum_L
        - c.sigma / math.sqrt(b)
        - abs(c.alpha) * c.G_perp
    )


def quadratic_branch_indicator(ens, x, indices, rho):
    """Exact branch quantity A_t for shared-curvature quadratics.

    With a constant Hessian A the curvature line integrals collapse to
    rho * A u, so A_t = ||g_batch - g_full|| - rho ||A (u_batch - u_full)||
    with u the gradient unit vectors.  Sign selects the lower-bound
    branch; undefined at a vanishing gradient.
    """
    if ens.kind != "quadratic":
        raise ValueError("branch indicator has closed form only for quadratic ensembles")
    g_b = ens.batch_grad(x, np.asarray(indices))
    g_f = ens.full_grad(np.asarray(x, dtype=float))
    nb, nf = np.linalg.norm(g_b), np.linalg.norm(g_f)
    if nb == 0.0 or nf == 0.0:
        raise ValueError("branch indicator undefined at a zero gradient")
    hess_gap = rho * np.linalg.norm(ens.curvature @ (g_b / nb - g_f / nf))
    return float(np.linalg.norm(g_b - g_f) - hess_gap)


class ScalingFit(NamedTuple):
    slope: float
    r_squared: float


def scaling_fit(measurements):
    """Least-squares slope and r^2 of log(mean noise) against log(b).

    Needs at least 5 distinct batch sizes and positive means.  Constant
    measurements fit slope 0 exactly; r^2 is reported as 1 there since
    the fit leaves no residual.
    """
    pts = [(int(b), float(m)) for b, m in measurements]
    if len({b for b, _ in pts}) < 5:
        raise ValueError("scaling fit needs at least 5 distinct batch sizes")
    if any(m <= 0 for _, m in pts):
        raise ValueError("scaling fit needs positive mean noise values")
    log_b = np.log([b for b, _ in pts])
    log_m = np.log([m for _, m in pts])
    slope, intercept = np.polyfit(log_b, log_m, 1)
    resid = log_m - (slope * log_b + intercept)
    ss_tot = float(np.sum((log_m - log_m.mean()) ** 2))
    r_sq = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return ScalingFit(float(slope), r_sq)


SCHEDULERS = ("constant", "cosine", "linear")


def admissible_eta_window(c, scheduler, b0=None):
    """Step-size window (lo, hi] under which the epsilon target is met.

    `scheduler` picks the constant-rate window or the peak-rate window
    of the decaying schedules (their published forms take the low rate
    to 0).  With B = C = 0 the lower end is 0; with C > 0 it needs the
    initial batch size b0 and the window can be empty, which raises.
    """
    if scheduler not in SCHEDULERS:
        raise ValueError(f"scheduler must be one of {SCHEDULERS}")
    if c.epsilon <= 0 or c.G <= 0 or c.sum_L <= 0:
        raise ValueError("window needs epsilon > 0, G > 0, sum_L > 0")
    n, eps2 = c.n, c.epsilon ** 2
    brace = n ** 2 + 4.0 * c.C * c.sum_L ** 2
    shared = n ** 3 * eps2 / ((abs(c.alpha) + 1.0) ** 2 * c.G ** 2 * c.sum_L * brace)
    hi = {"constant": shared / 6.0, "cosine": 2.0 * shared / 9.0, "linear": shared / 4.0}[scheduler]
    if c.C == 0.0:
        return 0.0, hi
    if b0 is None:
        raise ValueError("C > 0 makes the lower end depend on the initial batch size; pass b0")
    if not 1 <= b0 <= n:
        raise ValueError(f"b0 outside [1, {n}]")
    base = c.sigma * c.C / eps2 * (c.rho * c.G / math.sqrt(b0) + 3.0 * c.sigma * c.sum_L / (n * b0))
    lo = (12.0 if scheduler == "constant" else 24.0) * base
    if lo >= hi:
        raise ValueError(
            f"admissible window is empty: the C-driven lower bound {lo:.6g} "
            f"meets or exceeds the upper bound {hi:.6g} (C = {c.C:.6g})"
        )
    return lo, hi


def schedule_summary_thresholds(c, b0=None):
    """The general admissibility thresholds on the schedule summary pair.

    A schedule qualifies when H1 <= max_H1 and (|alpha|+1)^2 * H2 <= max_H2.
    The named windows in admissible_eta_window are these two thresholds
    specialized to each schedule's closed-form (H1, H2); exposing the raw
    pair lets that derivation be cross-checked.  max_H1 is +inf when
    sigma * C = 0 (the small-rho regime has no lower constraint).
    """
    if c.epsilon <= 0 or c.G <= 0 or c.sum_L <= 0:
        raise ValueError("thresholds need epsilon > 0, G > 0, sum_L > 0")
    n, eps2 = c.n, c.epsilon ** 2
    max_h2 = n ** 3 * eps2 / (6.0 * c.G ** 2 * c.sum_L * (n ** 2 + 4.0 * c.C * c.sum_L ** 2))
    if c.sigma * c.C == 0.0:
        return math.inf, max_h2
    if b0 is None:
        raise ValueError("C > 0 makes the H1 threshold depend on the initial batch size; pass b0")
    if not 1 <= b0 <= n:
        raise ValueError(f"b0 outside [1, {n}]")
    drift = c.rho * c.G / math.sqrt(b0) + 3.0 * c.sigma * c.sum_L / (n * b0)
    max_h1 = eps2 / (12.0 * c.sigma * c.C * drift)
    return max_h1, max_h2


def rho_window(c, b0):
    """Binding upper bound on the ascent radius rho for the constant-rate
    guarantee: the minimum of the (B, C)-dependent condition (vacuous at
    B = C = 0) and the unconditional one with the 2 sqrt(42) constant."""
    if c.epsilon <= 0 or c.G <= 0 or c.sum_L <= 0:
        raise ValueError("window needs epsilon > 0, G > 0, sum_L > 0")
    if not 1 <= b0 <= c.n:
        raise ValueError(f"b0 outside [1, {c.n}]")
    n, eps2 = c.n, c.epsilon ** 2
    soft = c.C * c.G * math.sqrt(b0) + c.B * c.sigma
    if soft == 0.0:
        cond_a = math.inf
    else:
        cond_a = n * math.sqrt(b0) * eps2 / (6.0 * c.G * soft * c.sum_L * (abs(c.alpha) + 1.0))
    cond_b = n * b0 * eps2 / (2.0 * math.sqrt(42.0) * c.G * math.hypot(n, b0) * c.sum_L)
    return min(cond_a, cond_b)


def convergence_verdict(trace, epsilon):
    """Minimum recorded full-SAM-gradient norm against the target.

    Accepts a run trace, a multi-seed aggregate (seed-averaged norms),
    or a bare sequence of norms.  Returns (achieved, min_norm, step of
    the minimum); raises if nothing was recorded.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if hasattr(trace, "recorded_sam_grad_norms"):
        steps, norms = trace.recorded_sam_grad_norms()
    else:
        norms = np.asarray(trace, dtype=float)
        steps = np.arange(norms.size)
    norms = np.asarray(norms, dtype=float)
    steps = np.asarray(steps)
    keep = np.isfinite(norms)
    if not keep.any():
        raise ValueError("trace contains no recorded full-SAM-gradient norms")
    norms, steps = norms[keep], steps[keep]
    k = int(np.argmin(norms))
    min_norm = float(norms[k])
    return min_norm <= epsilon, min_norm, int(steps[k])
