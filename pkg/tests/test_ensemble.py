import numpy as np
import pytest

from samlab.ensemble import (BatchSampler, QuadraticEnsemble, TinyMlpEnsemble,
                             empirical_sigma_sq, exact_sigma_sq,
                             finite_difference_gradient, full_gradient,
                             make_tiny_mlp_ensemble, minibatch_gradient,
                             random_quadratic)
from samlab.rng import stream


def two_anchor_quadratic(scale=1.0):
    anchors = np.array([[1.0, 0.0], [-1.0, 0.0]])
    return QuadraticEnsemble(anchors, scale * np.eye(2))


# ---------------------------------------------------------------- gradients

def test_full_gradient_at_anchor_mean_is_zero():
    ens = two_anchor_quadratic()
    assert np.array_equal(full_gradient(ens, np.zeros(2)), np.zeros(2))


def test_full_gradient_closed_form():
    ens = two_anchor_quadratic()
    g = full_gradient(ens, np.array([2.0, 0.0]))
    assert np.allclose(g, [2.0, 0.0], rtol=0, atol=1e-15)


def test_single_sample_full_equals_grad_i():
    ens = QuadraticEnsemble(np.array([[0.5, -0.25]]), np.eye(2))
    x = np.array([1.0, 1.0])
    assert np.array_equal(full_gradient(ens, x), ens.grad_i(x, 0))


def test_minibatch_gradient_closed_form():
    ens = two_anchor_quadratic()
    g = minibatch_gradient(ens, np.zeros(2), [0])  # anchor (1, 0)
    assert np.allclose(g, [-1.0, 0.0], rtol=0, atol=1e-15)


def test_minibatch_full_batch_equals_full_gradient_bitwise():
    ens = random_quadratic(n=37, d=6, spectrum=np.linspace(0.5, 3.0, 6), seed=2)
    x = stream(9, "x").standard_normal(6)
    assert np.array_equal(minibatch_gradient(ens, x, np.arange(37)),
                          full_gradient(ens, x))


def test_repeated_index_batch_averages_duplicates():
    ens = two_anchor_quadratic()
    x = np.array([0.3, -0.2])
    assert np.array_equal(minibatch_gradient(ens, x, [1, 1]),
                          minibatch_gradient(ens, x, [1]))


def test_empty_batch_rejected():
    ens = two_anchor_quadratic()
    with pytest.raises(ValueError):
        minibatch_gradient(ens, np.zeros(2), [])


def test_out_of_range_index_rejected():
    ens = two_anchor_quadratic()
    with pytest.raises((ValueError, IndexError)):
        ens.batch_grad(np.zeros(2), np.array([5]))


def test_dimension_mismatch_rejected():
    ens = two_anchor_quadratic()
    with pytest.raises(ValueError):
        full_gradient(ens, np.zeros(3))


@pytest.mark.parametrize("d", [1, 2, 7])
def test_quadratic_gradient_matches_finite_differences(d):
    ens = random_quadratic(n=12, d=d, spectrum=np.linspace(0.5, 4.0, d), seed=d, rotate=d > 1)
    gen = stream(d, "fd-probe")
    for _ in range(5):
        x = gen.standard_normal(d)
        idx = gen.integers(0, 12, size=4)
        g = ens.batch_grad(x, idx)
        fd = finite_difference_gradient(lambda y: ens.batch_value(y, idx), x)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_quadratic_value_gradient_consistency():
    # value differences along a segment integrate the gradient (trapezoid is
    # exact for quadratics)
    ens = random_quadratic(n=9, d=4, spectrum=np.linspace(1.0, 2.0, 4), seed=3)
    gen = stream(4, "seg")
    x, y = gen.standard_normal(4), gen.standard_normal(4)
    idx = np.array([0, 3, 5])
    lhs = ens.batch_value(y, idx) - ens.batch_value(x, idx)
    rhs = 0.5 * (ens.batch_grad(x, idx) + ens.batch_grad(y, idx)) @ (y - x)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


# ------------------------------------------------------------- sigma bounds

def test_exact_sigma_sq_examples():
    assert exact_sigma_sq(two_anchor_quadratic()) == pytest.approx(1.0, rel=1e-15)
    assert exact_sigma_sq(two_anchor_quadratic(scale=2.0)) == pytest.approx(4.0, rel=1e-15)
    same = QuadraticEnsemble(np.tile([0.7, -0.1], (5, 1)), np.eye(2))
    assert exact_sigma_sq(same) == 0.0


def test_exact_matches_empirical_sigma_sq():
    ens = random_quadratic(n=64, d=5, spectrum=np.linspace(0.5, 2.0, 5), seed=8)
    x = stream(8, "sigma-probe").standard_normal(5)
    # for quadratics the per-sample deviation is x-independent
    assert empirical_sigma_sq(ens, x) == pytest.approx(exact_sigma_sq(ens), rel=1e-12)
    assert empirical_sigma_sq(ens, x + 3.0) == pytest.approx(exact_sigma_sq(ens), rel=1e-12)


def test_unbiasedness_over_with_replacement_batches():
    # sample mean of minibatch gradients within 4 SE of the full gradient,
    # coordinatewise
    ens = random_quadratic(n=128, d=4, spectrum=np.linspace(0.5, 2.0, 4), seed=13)
    x = stream(13, "unbiased-probe").standard_normal(4)
    full = full_gradient(ens, x)
    gen = stream(13, "unbiased-batches")
    trials = 10_000
    grads = np.empty((trials, 4))
    for k in range(trials):
        grads[k] = ens.batch_grad(x, gen.integers(0, 128, size=8))
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(mean - full) <= 4 * se + 1e-12)


def test_variance_matches_sigma_over_b():
    ens = random_quadratic(n=256, d=6, spectrum=np.linspace(0.5, 2.0, 6), seed=21)
    x = stream(21, "var-probe").standard_normal(6)
    full = full_gradient(ens, x)
    target = exact_sigma_sq(ens)
    gen = stream(21, "var-batches")
    for b in (1, 4):
        vals = np.array([np.sum((ens.batch_grad(x, gen.integers(0, 256, size=b)) - full) ** 2)
                         for _ in range(2000)])
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - target / b) <= 4 * se


# ------------------------------------------------------------------ sampler

def test_sampler_full_batch_is_identity_and_consumes_no_randomness():
    gen = stream(5, "batches")
    before = gen.bit_generator.state["state"]["counter"].copy()
    sampler = BatchSampler(50, gen, "replacement")
    batches = list(sampler.epoch_batches(50))
    after = gen.bit_generator.state["state"]["counter"].copy()
    assert len(batches) == 1
    assert np.array_equal(batches[0].indices, np.arange(50))
    assert np.array_equal(before, after)


def test_sampler_replacement_step_count_and_range():
    sampler = BatchSampler(50, stream(5, "batches"), "replacement")
    batches = list(sampler.epoch_batches(8))
    assert len(batches) == 7  # ceil(50/8)
    for mb in batches:
        assert mb.indices.shape == (8,)
        assert mb.indices.min() >= 0 and mb.indices.max() < 50


def test_sampler_shuffle_covers_every_index_once():
    sampler = BatchSampler(50, stream(6, "batches"), "shuffle")
    batches = list(sampler.epoch_batches(8))
    assert len(batches) == 7
    seen = np.concatenate([mb.indices for mb in batches])
    assert np.array_equal(np.sort(seen), np.arange(50))
    assert batches[-1].indices.size == 2  # short tail batch


def test_sampler_rejects_bad_inputs():
    with pytest.raises(ValueError):
        BatchSampler(10, stream(0, "t"), "bogus")
    sampler = BatchSampler(10, stream(0, "t"), "replacement")
    with pytest.raises(ValueError):
        list(sampler.epoch_batches(0))
    with pytest.raises(ValueError):
        list(sampler.epoch_batches(11))


# ---------------------------------------------------------------- ensembles

def test_quadratic_requires_symmetric_psd_curvature():
    with pytest.raises(ValueError):
        QuadraticEnsemble(np.zeros((2, 2)), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        QuadraticEnsemble(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, -0.5]]))


def test_quadratic_nonfinite_gradient_names_sample():
    anchors = np.array([[1.0], [np.inf]])
    with pytest.raises(ValueError):
        QuadraticEnsemble(anchors, np.eye(1))


def test_mlp_gradient_matches_finite_differences():
    ens = make_tiny_mlp_ensemble(n=24, sizes=(2, 5, 3), seed=4, label_noise=0.1)
    gen = stream(4, "mlp-fd")
    for _ in range(3):
        x = 0.5 * gen.standard_normal(ens.d)
        idx = gen.integers(0, ens.n, size=6)
        g = ens.batch_grad(x, idx)
        fd = finite_difference_gradient(lambda y: ens.batch_value(y, idx), x)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_mlp_squared_loss_gradient_matches_finite_differences():
    ens = make_tiny_mlp_ensemble(n=16, sizes=(2, 4, 3), seed=6, loss="squared")
    gen = stream(6, "mlp-fd-sq")
    x = 0.5 * gen.standard_normal(ens.d)
    idx = np.arange(16)
    fd = finite_difference_gradient(lambda y: ens.batch_value(y, idx), x)
    assert np.allclose(ens.batch_grad(x, idx), fd, rtol=1e-5, atol=1e-7)


def test_mlp_full_equals_batch_of_everything_bitwise():
    ens = make_tiny_mlp_ensemble(n=20, sizes=(2, 4, 3), seed=5)
    x = 0.3 * stream(5, "mlp-probe").standard_normal(ens.d)
    assert np.array_equal(ens.full_grad(x), ens.batch_grad(x, np.arange(20)))


def test_linear_squared_mlp_reduces_to_quadratic():
    # no hidden layer + squared loss => the loss is quadratic in the
    # parameters, so the gradient map is affine
    ens = TinyMlpEnsemble(
        inputs=stream(11, "lin-x").standard_normal((10, 3)),
        labels=stream(11, "lin-y").integers(0, 2, size=10),
        sizes=(3, 2),
        loss="squared",
    )
    gen = stream(11, "lin-probe")
    x, y = gen.standard_normal(ens.d), gen.standard_normal(ens.d)
    lam = 0.3
    idx = np.arange(10)
    blend = ens.batch_grad(lam * x + (1 - lam) * y, idx)
    parts = lam * ens.batch_grad(x, idx) + (1 - lam) * ens.batch_grad(y, idx)
    assert np.allclose(blend, parts, rtol=1e-9, atol=1e-12)


def test_mlp_losses_nonnegative():
    for loss in ("softmax", "squared"):
        ens = make_tiny_mlp_ensemble(n=30, sizes=(2, 6, 3), seed=9, loss=loss)
        gen = stream(9, f"nonneg-{loss}")
        for _ in range(5):
            x = gen.standard_normal(ens.d)
            assert ens.batch_value(x, np.arange(30)) >= 0.0


def test_mlp_eval_value_uses_heldout_split():
    ens = make_tiny_mlp_ensemble(n=40, sizes=(2, 4, 3), seed=12)
    x = 0.2 * stream(12, "eval-probe").standard_normal(ens.d)
    assert ens.eval_value(x) != pytest.approx(ens.full_value(x), rel=1e-9)


def test_mlp_size_limits_enforced():
    with pytest.raises(ValueError):
        make_tiny_mlp_ensemble(n=20_000, sizes=(2, 4, 3), seed=0)
    with pytest.raises(ValueError):
        make_tiny_mlp_ensemble(n=10, sizes=(2, 5000, 3), seed=0)


def test_label_noise_is_deterministic_and_bounded():
    a = make_tiny_mlp_ensemble(n=200, sizes=(2, 4, 3), seed=7, label_noise=0.2)
    b = make_tiny_mlp_ensemble(n=200, sizes=(2, 4, 3), seed=7, label_noise=0.2)
    clean = make_tiny_mlp_ensemble(n=200, sizes=(2, 4, 3), seed=7, label_noise=0.0)
    assert np.array_equal(a.labels, b.labels)
    flipped = np.mean(a.labels != clean.labels)
    assert 0.05 < flipped < 0.35  # about 0.2 of labels moved
