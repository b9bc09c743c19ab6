"""Self-contained verification checks behind ``samlab check``.

Each check builds a small, seeded problem, evaluates the relevant bound
or identity, and returns pass/fail rows.  They are desk-scale versions
of the heavier assertions in the test suite, so ``samlab check all``
gives a quick health read without pytest.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .diagnostics import mc_noise_norm
from .ensemble import empirical_sigma_sq, make_tiny_mlp_ensemble, random_quadratic
from .sam import SamConfig
from .schedules import (BatchSchedule, ConstantLr, CosineLr, LinearLr,
                        ScheduleAlgebraError, aggregates, lr_sums)
from .theory import (ProblemConstants, convergence_verdict, scaling_fit,
                     theorem1_upper_bound, theorem2_lower_bound,
                     admissible_eta_window, rho_window)

CHECK_NAMES = ("theorem1", "theorem2", "variance", "scaling", "schedulers", "convergence")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def quad_gradient_bounds(ens, x, rho=0.0):
    """A-priori (G, G_perp) bounds for a quadratic ensemble at probe x.

    Any mini-batch gradient at x splits as A(x - mean anchor) plus a mean
    of per-sample deviations, so its norm is at most ||A(x - abar)|| plus
    the largest deviation norm; ascent points x + eps add rho * lam_max.
    """
    dev = (ens.anchors - ens.mean_anchor) @ ens.curvature
    max_dev = float(np.max(np.linalg.norm(dev, axis=1)))
    lam = float(np.linalg.eigvalsh(ens.curvature)[-1])
    base = float(np.linalg.norm(ens.curvature @ (x - ens.mean_anchor)))
    g_perp = base + max_dev
    g = g_perp + rho * lam
    return g, g_perp


def _quad_setup(n=256, d=10, anchor_scale=1.0, seed=11):
    ens = random_quadratic(n=n, d=d, spectrum=1.0, anchor_scale=anchor_scale, seed=seed)
    gen = rngmod.stream(seed, "check-probes")
    probes = []
    for r in (0.5, 2.0):
        u = gen.standard_normal(d)
        probes.append(ens.minimizer + r * u / np.linalg.norm(u))
    return ens, probes


def check_theorem1(out_dir=None):
    ens, probes = _quad_setup()
    eta = 0.01
    sigma = float(np.sqrt(ens.sigma_sq))
    sum_l = float(ens.sum_lipschitz)
    worst = np.inf
    cells = 0
    for x in probes:
        for rho in (0.0, 1e-3):
            g, g_perp = quad_gradient_bounds(ens, x, rho)
            for alpha in (0.0, 0.02):
                cfg = SamConfig(rho=rho, alpha=alpha)
                c = ProblemConstants(n=ens.n, sum_L=sum_l, sigma=sigma, rho=rho,
                                     alpha=alpha, G=g, G_perp=g_perp)
                for b in (1, 4, 16, 64, ens.n):
                    mean, se = mc_noise_norm(ens, x, b, cfg, eta, trials=300,
                                             seed=rngmod.derive_int(17, f"t1-{rho}-{alpha}-{b}"))
                    bound = theorem1_upper_bound(c, eta, b)
                    worst = min(worst, bound + 3 * se - mean)
                    cells += 1
    passed = worst >= 0
    detail = (f"{cells} grid cells; min(bound + 3·SE − mean) = {worst:.3e}"
              f" (negative would break the bound)")
    return [CheckResult("theorem1", passed, detail)]


def check_theorem2(out_dir=None):
    ens, probes = _quad_setup()
    sigma = float(np.sqrt(ens.sigma_sq))
    sum_l = float(ens.sum_lipschitz)
    results = []

    # sandwich: the lower-bound branches never exceed the upper bound
    worst = np.inf
    for x in probes:
        for rho in (0.0, 1e-3):
            g, g_perp = quad_gradient_bounds(ens, x, rho)
            for alpha in (0.0, 0.02):
                c = ProblemConstants(n=ens.n, sum_L=sum_l, sigma=sigma, rho=rho,
                                     alpha=alpha, G=g, G_perp=g_perp)
                for eta in (1e-3, 1e-2):
                    for b in (1, 4, 16, 64, ens.n):
                        upper = theorem1_upper_bound(c, eta, b)
                        cases = ("b_eq_n",) if b == ens.n else ("A_nonneg", "A_neg")
                        for case in cases:
                            lower = theorem2_lower_bound(c, eta, b, case)
                            worst = min(worst, upper - lower + 1e-12)
    results.append(CheckResult(
        "theorem2.sandwich", worst >= 0,
        f"min(upper − lower) = {worst:.3e} across the parameter grid"))

    # A_nonneg branch is nonnegative whenever rho <= sigma/(2*sum_L), alpha=0
    rho_small = 0.5 * sigma / (2 * sum_l)
    c0 = ProblemConstants(n=ens.n, sum_L=sum_l, sigma=sigma, rho=rho_small, alpha=0.0)
    min_l = min(theorem2_lower_bound(c0, eta, b, "A_nonneg")
                for eta in (1e-3, 1e-2) for b in (1, 4, 16, 64, 128))
    results.append(CheckResult(
        "theorem2.nonneg", min_l >= -1e-15,
        f"min lower bound {min_l:.3e} with rho = sigma/(4·ΣL) and alpha = 0"))

    # full-batch branch agrees with the upper bound exactly
    c1 = ProblemConstants(n=ens.n, sum_L=sum_l, sigma=sigma, rho=1e-3, alpha=0.02,
                          G=1.0, G_perp=0.7)
    gap = abs(theorem2_lower_bound(c1, 0.01, ens.n, "b_eq_n")
              - theorem1_upper_bound(c1, 0.01, ens.n))
    results.append(CheckResult(
        "theorem2.full_batch", gap <= 1e-15,
        f"|lower − upper| = {gap:.1e} at b = n (both reduce to η·|α|·G⊥)"))
    return results


def check_variance(out_dir=None):
    ens, probes = _quad_setup(n=512, d=8, seed=5)
    x = probes[0]
    sigma_sq = float(ens.sigma_sq)
    full = ens.full_grad(x)
    gen = rngmod.stream(23, "check-variance")
    rows = []
    ok = True
    details = []
    for b in (1, 2, 4, 8):
        trials = 400
        vals = np.empty(trials)
        for k in range(trials):
            idx = gen.integers(0, ens.n, size=b)
            vals[k] = np.sum((ens.batch_grad(x, idx) - full) ** 2)
        mean = vals.mean()
        se = vals.std(ddof=1) / np.sqrt(trials)
        target = sigma_sq / b
        upper_ok = mean <= target + 3 * se
        tight_ok = abs(mean - target) <= 4 * se
        ok = ok and upper_ok and tight_ok
        details.append(f"b={b}: mean={mean:.4g} target={target:.4g} se={se:.2g}")
    rows.append(CheckResult("variance.quadratic", ok, "; ".join(details)))

    mlp = make_tiny_mlp_ensemble(n=128, sizes=(2, 8, 3), seed=3, label_noise=0.1)
    xm = rngmod.stream(7, "check-variance-mlp").standard_normal(mlp.d) * 0.5
    sig2 = empirical_sigma_sq(mlp, xm)
    fullm = mlp.full_grad(xm)
    ok2 = True
    for b in (1, 2, 4, 8):
        vals = np.empty(300)
        for k in range(300):
            idx = gen.integers(0, mlp.n, size=b)
            vals[k] = np.sum((mlp.batch_grad(xm, idx) - fullm) ** 2)
        mean, se = vals.mean(), vals.std(ddof=1) / np.sqrt(300)
        ok2 = ok2 and mean <= sig2 / b + 3 * se
    rows.append(CheckResult("variance.tiny_mlp", ok2,
                            f"empirical σ² = {sig2:.4g}; E‖g_B − g‖² ≤ σ²/b + 3·SE for b ∈ 1..8"))
    return rows


def check_scaling(out_dir=None):
    ens = random_quadratic(n=1024, d=10, spectrum=1.0, anchor_scale=1.0, seed=19)
    gen = rngmod.stream(19, "check-scaling-probe")
    u = gen.standard_normal(ens.d)
    x = ens.minimizer + u / np.linalg.norm(u)
    cfg = SamConfig(rho=1e-3, alpha=0.0)
    batch_sizes = (2, 4, 8, 16, 32, 64, 128)
    means, ses = [], []
    for b in batch_sizes:
        mean, se = mc_noise_norm(ens, x, b, cfg, eta=0.01, trials=400,
                                 seed=rngmod.derive_int(19, f"scaling-{b}"))
        means.append(mean)
        ses.append(se)
    fit = scaling_fit(list(zip(batch_sizes, means)))
    passed = -0.65 <= fit.slope <= -0.35 and fit.r_squared >= 0.95
    detail = f"slope = {fit.slope:+.3f}, r² = {fit.r_squared:.4f} over b ∈ {batch_sizes}"
    if out_dir:
        from .plots import plot_scaling
        path = os.path.join(out_dir, "scaling_fit.png")
        plot_scaling(batch_sizes, means, ses, fit, path, title="noise norm vs batch size")
        detail += f"; figure: {path}"
    return [CheckResult("scaling", passed, detail)]


def check_schedulers(out_dir=None):
    rows = []

    sum_eta, sum_eta_sq = lr_sums(ConstantLr(0.1), 100)
    ok = abs(sum_eta - 10.0) < 1e-12 and abs(sum_eta_sq - 1.0) < 1e-12
    rows.append(CheckResult("schedulers.constant", ok,
                            f"Ση = {sum_eta:.12g}, Ση² = {sum_eta_sq:.12g} over T = 100"))

    sum_eta, _ = lr_sums(CosineLr(0.0, 0.1, 1, 4), 4)
    m = w = 0.05
    closed = m * 4 + w * 1
    rows.append(CheckResult("schedulers.cosine_sum", abs(sum_eta - closed) < 1e-12,
                            f"K=1, E=4: Ση = {sum_eta:.12g} vs closed form {closed:.12g}"))

    sum_eta, _ = lr_sums(LinearLr(0.0, 0.1, 2), 2)
    rows.append(CheckResult("schedulers.linear_sum", abs(sum_eta - 0.15) < 1e-12,
                            f"lo=0, hi=0.1, T=2: Ση = {sum_eta:.12g} (0.1 + 0.05)"))

    # H1 always certifies the step count on the training window
    ok = True
    for sched, T in ((ConstantLr(0.05), 50), (CosineLr(1e-3, 0.1, 1, 64), 64),
                     (CosineLr(0.0, 0.1, 4, 16), 64), (LinearLr(0.0, 0.1, 128), 128)):
        sum_eta, _ = lr_sums(sched, T)
        h1 = 1 / sched.eta if isinstance(sched, ConstantLr) else 2 / (sched.lo + sched.hi)
        ok = ok and T / sum_eta <= h1 * (1 + 1e-9)
    rows.append(CheckResult("schedulers.h1", ok, "T/Ση ≤ H₁ on constant, cosine, linear grids"))

    # the second summary inequality is not exact on the discrete window;
    # aggregates() must refuse rather than hand out a wrong certificate
    raised = []
    try:
        aggregates(LinearLr(0.0, 0.1, 100), 100)
        raised.append(False)
    except ScheduleAlgebraError:
        raised.append(True)
    try:
        aggregates(CosineLr(0.0, 0.1, 8, 100), 800)
        raised.append(False)
    except ScheduleAlgebraError:
        raised.append(True)
    try:
        aggregates(ConstantLr(0.1), 100)
        raised.append(True)
    except ScheduleAlgebraError:
        raised.append(False)
    rows.append(CheckResult(
        "schedulers.h2_guard", all(raised),
        "aggregates() accepts the constant schedule and rejects discrete-window "
        "H₂ violations (decaying schedules where Ση²/Ση exceeds the summary constant)"))
    return rows


def check_convergence(out_dir=None):
    ens = random_quadratic(n=256, d=8, spectrum=1.0, anchor_scale=0.02, seed=29)
    eps = 2e-2
    x0_dist = 0.1
    gen = rngmod.stream(29, "check-convergence")
    u = gen.standard_normal(ens.d)
    x0 = ens.minimizer + x0_dist * u / np.linalg.norm(u)
    g, g_perp = quad_gradient_bounds(ens, x0, rho=0.0)
    g, g_perp = 1.1 * g, 1.1 * g_perp  # headroom: the contraction keeps later
    # iterates inside the starting ball, so the probe-at-x0 bound plus 10%
    # covers the whole trajectory
    sigma = float(np.sqrt(ens.sigma_sq))
    c = ProblemConstants(n=ens.n, sum_L=float(ens.sum_lipschitz), sigma=sigma,
                         rho=0.0, alpha=0.0, G=g, G_perp=g_perp, epsilon=eps)
    lo, hi = admissible_eta_window(c, "constant")
    eta = hi
    rho = 0.9 * rho_window(c, b0=8)
    from .harness import config_from_dict, run
    raw = {
        "ensemble": {"kind": "quadratic", "n": 256, "d": 8, "seed": 29,
                     "anchor_scale": 0.02, "spectrum": 1.0},
        "sam": {"rho": rho, "alpha": 0.0},
        "batch": {"stages": [[8, 20], [256, 2200]]},
        "lr": {"kind": "constant", "eta": eta},
        "seeds": [1],
        "init": {"kind": "offset", "distance": x0_dist, "seed": 29},
        "epsilon": eps,
    }
    trace = run(config_from_dict(raw), 1)
    achieved, min_norm, argmin = convergence_verdict(trace, eps)
    detail = (f"η = {eta:.3e} (window high), ρ = {rho:.3e}; min recorded "
              f"‖∇f̂‖ = {min_norm:.3e} at step {argmin}, target {eps:g}")
    return [CheckResult("convergence", bool(achieved), detail)]


def run_checks(name, out_dir=None):
    """Run one named check or all of them; returns CheckResult rows."""
    table = {
        "theorem1": check_theorem1,
        "theorem2": check_theorem2,
        "variance": check_variance,
        "scaling": check_scaling,
        "schedulers": check_schedulers,
        "convergence": check_convergence,
    }
    if name == "all":
        rows = []
        for key in CHECK_NAMES:
            rows.extend(table[key](out_dir))
        return rows
    if name not in table:
        raise ValueError(f"unknown check {name!r}; choose from {CHECK_NAMES + ('all',)}")
    return table[name](out_dir)
