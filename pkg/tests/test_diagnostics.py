"""Noise measurement, gradient-bound tracking, cadence, and sharpness."""

import numpy as np
import pytest

from samlab.diagnostics import (
    GradBoundEstimates,
    SharpnessSpec,
    adaptive_sharpness,
    default_cadence,
    grad_bound_update,
    mc_noise_norm,
    noise_sample,
)
from samlab.ensemble import QuadraticEnsemble, random_quadratic
from samlab.rng import stream
from samlab.sam import SamConfig, decompose, sam_gradient


def small_ens(seed=3, n=48, d=5):
    return random_quadratic(n=n, d=d, spectrum=np.linspace(0.5, 2.0, d), seed=seed)


# ---------------------------------------------------------------------------
# noise_sample


def test_noise_zero_for_full_batch_alpha_zero():
    ens = small_ens()
    cfg = SamConfig(rho=0.01, alpha=0.0)
    x = np.linspace(-1, 1, ens.d)
    ns = noise_sample(ens, x, np.arange(ens.n), cfg, eta=0.1)
    assert ns.norm == 0.0
    assert np.array_equal(ns.omega, np.zeros(ens.d))
    assert ns.eta_times_norm == 0.0


def test_noise_full_batch_nonzero_alpha_is_perp_term():
    ens = small_ens(seed=9)
    cfg = SamConfig(rho=0.05, alpha=0.3)
    x = np.linspace(0.2, 1.0, ens.d)
    ns = noise_sample(ens, x, np.arange(ens.n), cfg, eta=0.1)
    assert np.array_equal(ns.omega_hat, np.zeros(ens.d))
    g_sam = sam_gradient(ens, x, None, cfg)
    perp = decompose(ens.full_grad(x), g_sam).perpendicular
    np.testing.assert_allclose(ns.omega, 0.3 * perp, rtol=1e-12, atol=1e-15)


def test_noise_two_anchor_example():
    # n=2, d=1, anchors +1 and -1: full gradient at 0 vanishes, the
    # single-sample batch {+1 anchor} has gradient -1, so omega = 1.
    ens = QuadraticEnsemble(np.array([[1.0], [-1.0]]), np.eye(1))
    cfg = SamConfig(rho=0.0, alpha=0.0)
    ns = noise_sample(ens, np.array([0.0]), np.array([0]), cfg, eta=1.0)
    np.testing.assert_allclose(ns.omega, [1.0], rtol=1e-15)
    assert ns.norm == pytest.approx(1.0, rel=1e-15)


def test_noise_reconstruction_invariant():
    rng = stream(21, "noise-sweep")
    for k in range(1000):
        n = int(rng.integers(4, 32))
        d = int(rng.integers(1, 7))
        ens = random_quadratic(
            n=n, d=d, spectrum=np.linspace(0.5, 3.0, d), seed=int(rng.integers(1 << 30))
        )
        cfg = SamConfig(rho=float(rng.uniform(0, 0.2)), alpha=float(rng.uniform(-0.5, 0.5)))
        x = rng.normal(size=d)
        idx = rng.integers(0, n, size=int(rng.integers(1, n + 1)))
        ns = noise_sample(ens, x, idx, cfg, eta=0.1)
        g = ens.batch_grad(x, idx)
        from samlab.sam import perturbation

        eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
        batch_sam = ens.batch_grad(x + eps, idx)
        perp = decompose(g, batch_sam, cfg.zero_grad_threshold).perpendicular
        rebuilt = ns.omega_hat + cfg.alpha * perp
        scale = max(float(np.linalg.norm(ns.omega)), 1.0)
        assert np.linalg.norm(ns.omega - rebuilt) <= 1e-12 * scale
        assert ns.eta_times_norm == pytest.approx(0.1 * ns.norm, rel=1e-15)


# ---------------------------------------------------------------------------
# mc_noise_norm


def test_mc_requires_enough_trials():
    ens = small_ens()
    with pytest.raises(ValueError):
        mc_noise_norm(ens, np.zeros(ens.d), 4, SamConfig(), 0.1, trials=50)


def test_mc_batch_size_bounds():
    ens = small_ens()
    with pytest.raises(ValueError):
        mc_noise_norm(ens, np.zeros(ens.d), 0, SamConfig(), 0.1, trials=100)
    with pytest.raises(ValueError):
        mc_noise_norm(ens, np.zeros(ens.d), ens.n + 1, SamConfig(), 0.1, trials=100)


def test_mc_full_batch_alpha_zero_is_exactly_zero():
    ens = small_ens(seed=4)
    mean, se = mc_noise_norm(
        ens, np.ones(ens.d), ens.n, SamConfig(rho=0.01), 0.1, trials=100
    )
    assert mean == 0.0 and se == 0.0


def test_mc_mean_non_increasing_in_batch_size():
    ens = small_ens(seed=6, n=64)
    cfg = SamConfig(rho=1e-3, alpha=0.0)
    x = np.full(ens.d, 0.7)
    m4, se4 = mc_noise_norm(ens, x, 4, cfg, eta=0.1, trials=600, seed=1)
    m64, se64 = mc_noise_norm(ens, x, 64, cfg, eta=0.1, trials=600, seed=2)
    assert m4 >= m64 - 2 * (se4 + se64)


def test_mc_seed_determinism():
    ens = small_ens(seed=8)
    cfg = SamConfig(rho=0.01, alpha=0.1)
    x = np.full(ens.d, 0.3)
    a = mc_noise_norm(ens, x, 6, cfg, eta=0.05, trials=150, seed=9)
    b = mc_noise_norm(ens, x, 6, cfg, eta=0.05, trials=150, seed=9)
    assert a == b


def test_squared_noise_matches_sigma_sq_over_b():
    # For rho=0, alpha=0 the noise is the plain gradient gap, whose
    # squared norm has mean sigma^2/b under with-replacement sampling.
    ens = random_quadratic(n=96, d=4, spectrum=np.linspace(0.5, 2.0, 4), seed=31)
    cfg = SamConfig(rho=0.0, alpha=0.0)
    x = np.full(4, 0.4)
    rng = stream(31, "sq-noise")
    for b in (1, 4, 16):
        sq = np.empty(800)
        for k in range(800):
            idx = rng.integers(0, ens.n, size=b)
            sq[k] = noise_sample(ens, x, idx, cfg, eta=1.0).norm ** 2
        se = sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(sq.mean() - ens.sigma_sq / b) <= 4 * se


# ---------------------------------------------------------------------------
# cadence


def test_default_cadence():
    assert default_cadence(100) == 1
    assert default_cadence(200) == 1
    assert default_cadence(201) == 2
    assert default_cadence(1000) == 5
    assert default_cadence(1) == 1


# ---------------------------------------------------------------------------
# grad_bound_update


def test_grad_bound_first_update_is_max_of_four_norms():
    ens = small_ens(seed=12)
    cfg = SamConfig(rho=0.02, alpha=0.1)
    x = np.full(ens.d, 0.5)
    idx = np.array([0, 5, 7])
    est = grad_bound_update(GradBoundEstimates(), ens, x, idx, cfg)

    from samlab.sam import perturbation

    g = ens.batch_grad(x, idx)
    eps = perturbation(g, cfg.rho, cfg.u, cfg.zero_grad_threshold)
    batch_sam = ens.batch_grad(x + eps, idx)
    norms = [
        np.linalg.norm(ens.full_grad(x + eps)),
        np.linalg.norm(batch_sam),
        np.linalg.norm(sam_gradient(ens, x, None, cfg)),
        np.linalg.norm(decompose(g, batch_sam).perpendicular),
    ]
    assert est.G_hat == pytest.approx(max(norms), rel=1e-15)
    assert est.G_perp_hat == pytest.approx(norms[3], rel=1e-15)


def test_grad_bound_idempotent():
    ens = small_ens(seed=13)
    cfg = SamConfig(rho=0.01)
    x = np.full(ens.d, -0.2)
    idx = np.arange(8)
    est1 = grad_bound_update(GradBoundEstimates(), ens, x, idx, cfg)
    est2 = grad_bound_update(est1, ens, x, idx, cfg)
    assert est1 == est2


def test_grad_bound_monotone_over_random_updates():
    ens = small_ens(seed=14)
    cfg = SamConfig(rho=0.05, alpha=0.2)
    rng = stream(14, "bounds")
    est = GradBoundEstimates()
    prev = est
    for _ in range(100):
        x = rng.normal(size=ens.d)
        idx = rng.integers(0, ens.n, size=8)
        est = grad_bound_update(est, ens, x, idx, cfg)
        assert est.G_hat >= prev.G_hat
        assert est.G_perp_hat >= prev.G_perp_hat
        assert est.G_hat >= est.G_perp_hat
        prev = est


# ---------------------------------------------------------------------------
# adaptive sharpness


def test_sharpness_isotropic_at_minimizer():
    # f(x) = half squared distance to the single anchor; the box corner
    # at radius 0.1 in both coordinates gives 0.5 * (0.01 + 0.01).
    anchor = np.array([[0.3, -0.4]])
    ens = QuadraticEnsemble(anchor, np.eye(2))
    val = adaptive_sharpness(ens, anchor[0], SharpnessSpec(radius=0.1), seed=0)
    assert val == pytest.approx(0.01, rel=0.01)


def test_sharpness_1d_off_minimizer():
    ens = QuadraticEnsemble(np.zeros((1, 1)), np.eye(1))
    val = adaptive_sharpness(ens, np.array([1.0]), SharpnessSpec(radius=0.1), seed=0)
    # 0.5 * 1.1^2 - 0.5 = 0.105 at the +0.1 box corner
    assert val == pytest.approx(0.105, rel=0.01)


def test_sharpness_tiny_radius_limit():
    ens = QuadraticEnsemble(np.zeros((1, 1)), np.eye(1))
    val = adaptive_sharpness(ens, np.array([1.0]), SharpnessSpec(radius=1e-12), seed=0)
    assert 0.0 <= val <= 1e-10


def test_sharpness_nonnegative_on_random_sweep():
    rng = stream(55, "sharp-sweep")
    for k in range(20):
        d = int(rng.integers(1, 5))
        ens = random_quadratic(
            n=8, d=d, spectrum=np.linspace(0.5, 2.0, d), seed=int(rng.integers(1 << 30))
        )
        x = rng.normal(size=d)
        val = adaptive_sharpness(ens, x, SharpnessSpec(radius=1e-3, restarts=3), seed=k)
        assert val >= 0.0


def test_sharpness_seed_determinism():
    ens = small_ens(seed=17)
    x = np.full(ens.d, 0.2)
    spec = SharpnessSpec(radius=0.01)
    assert adaptive_sharpness(ens, x, spec, seed=5) == adaptive_sharpness(
        ens, x, spec, seed=5
    )


def test_sharpness_anisotropic_scaling():
    anchor = np.zeros((1, 2))
    ens = QuadraticEnsemble(anchor, np.eye(2))
    spec = SharpnessSpec(radius=0.1, scaling=np.array([1.0, 10.0]))
    val = adaptive_sharpness(ens, np.zeros(2), spec, seed=0)
    # box half-widths (0.1, 1.0): max at the corner, 0.5*(0.01 + 1.0)
    assert val == pytest.approx(0.505, rel=0.01)


def test_sharpness_spec_validation():
    with pytest.raises(ValueError):
        SharpnessSpec(radius=0.0)
    with pytest.raises(ValueError):
        SharpnessSpec(restarts=0)
    ens = small_ens()
    with pytest.raises(ValueError):
        adaptive_sharpness(
            ens, np.zeros(ens.d), SharpnessSpec(scaling=np.ones(ens.d + 1)), seed=0
        )
