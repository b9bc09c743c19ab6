"""Finite loss ensembles f_S(x) = (1/n) sum_i f_i(x).

Two concrete families are provided: shared-curvature quadratics, for
which the per-sample smoothness constants and the gradient-variance
proxy sigma^2 are available in closed form, and a tiny multilayer
perceptron on synthetic blob data with hand-written backprop.  Both
expose vectorized mini-batch values and gradients; a mini-batch is a
plain index array into the ensemble.
"""

from dataclasses import dataclass

import numpy as np

PARAM_DTYPE = np.float64


def as_param_vector(x, d=None):
    """Validate and return a flat float64 parameter vector."""
    x = np.asarray(x, dtype=PARAM_DTYPE)
    if x.ndim != 1:
        raise ValueError(f"parameter vector must be 1-d, got shape {x.shape}")
    if d is not None and x.shape[0] != d:
        raise ValueError(f"parameter vector has dimension {x.shape[0]}, expected {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("parameter vector contains non-finite entries")
    return x


@dataclass(frozen=True)
class MiniBatch:
    """Index batch drawn from [0, n); `mode` records how it was sampled."""

    indices: np.ndarray
    mode: str


class BatchSampler:
    """Draws mini-batches of a given size from an ensemble of size n.

    Modes:
      * "replacement" (default): each batch is i.i.d. uniform with
        replacement, matching the sampling model under which the
        variance proxy sigma^2/b is exact.
      * "shuffle": each epoch partitions a fresh permutation into
        consecutive chunks; no duplicates within a batch, and the last
        chunk of an epoch may be short when b does not divide n.
    """

    MODES = ("replacement", "shuffle")

    def __init__(self, n, rng, mode="replacement"):
        if mode not in self.MODES:
            raise ValueError(f"unknown sampling mode {mode!r}; choose from {self.MODES}")
        if n < 1:
            raise ValueError("sampler needs n >= 1")
        self.n = int(n)
        self.mode = mode
        self.rng = rng

    def epoch_batches(self, batch_size):
        """Yield the ceil(n/b) mini-batches of one epoch."""
        b = int(batch_size)
        if not 1 <= b <= self.n:
            raise ValueError(f"batch size {b} outside [1, {self.n}]")
        steps = -(-self.n // b)
        if b == self.n:
            # Full batch: deterministic, consumes no randomness.
            full = np.arange(self.n)
            for _ in range(steps):
                yield MiniBatch(full, self.mode)
        elif self.mode == "replacement":
            for _ in range(steps):
                yield MiniBatch(self.rng.integers(0, self.n, size=b), self.mode)
        else:
            perm = self.rng.permutation(self.n)
            for k in range(steps):
                yield MiniBatch(perm[k * b:(k + 1) * b], self.mode)


class LossEnsemble:
    """Base interface: n per-sample losses over a d-dimensional parameter."""

    kind = "abstract"

    def __init__(self, n, d):
        self.n = int(n)
        self.d = int(d)
        self.lipschitz_constants = None  # per-sample gradient Lipschitz L_i
        self.sigma_sq = None             # exact E_i ||grad f_i - grad f_S||^2, if known

    # Per-sample and batch evaluations; subclasses vectorize these.
    def batch_value(self, x, indices):
        raise NotImplementedError

    def batch_grad(self, x, indices):
        raise NotImplementedError

    def value_i(self, x, i):
        return self.batch_value(x, np.array([i]))

    def grad_i(self, x, i):
        return self.batch_grad(x, np.array([i]))

    def full_value(self, x):
        return self.batch_value(x, np.arange(self.n))

    def full_grad(self, x):
        return self.batch_grad(x, np.arange(self.n))

    def eval_value(self, x):
        """Held-out surrogate loss; defaults to the training objective."""
        return self.full_value(x)

    @property
    def sum_lipschitz(self):
        if self.lipschitz_constants is None:
            raise ValueError(f"{self.kind} ensemble has no closed-form Lipschitz constants")
        return float(np.sum(self.lipschitz_constants))

    def _check_indices(self, indices):
        indices = np.asarray(indices)
        if indices.ndim != 1 or indices.size == 0:
            raise ValueError("batch must be a non-empty 1-d index array")
        if indices.min() < 0 or indices.max() >= self.n:
            raise ValueError(f"batch indices outside [0, {self.n})")
        return indices


def full_gradient(ens, x):
    """Gradient of the ensemble average at x."""
    return ens.full_grad(as_param_vector(x, ens.d))


def minibatch_gradient(ens, x, indices):
    """Mean per-sample gradient over the index batch."""
    return ens.batch_grad(as_param_vector(x, ens.d), indices)


def exact_sigma_sq(ens):
    """Closed-form gradient-variance proxy, where the family admits one."""
    if ens.sigma_sq is None:
        raise ValueError(f"{ens.kind} ensemble has no exact sigma^2; use empirical_sigma_sq")
    return float(ens.sigma_sq)


def empirical_sigma_sq(ens, x):
    """(1/n) sum_i ||grad f_i(x) - grad f_S(x)||^2, computed exactly at x."""
    x = as_param_vector(x, ens.d)
    g = ens.full_grad(x)
    total = 0.0
    for i in range(ens.n):
        total += float(np.sum((ens.batch_grad(x, np.array([i])) - g) ** 2))
    return total / ens.n


class QuadraticEnsemble(LossEnsemble):
    """f_i(x) = 1/2 (x - a_i)^T A (x - a_i) with one shared PSD curvature A.

    Gradients are A(x - a_i), so the mini-batch gradient is
    A(x - mean of the batch anchors) and every theory-side constant is
    exact: L_i = lambda_max(A) for all i and
    sigma^2 = (1/n) sum_i ||A(a_i - abar)||^2, independent of x.
    """

    kind = "quadratic"

    def __init__(self, anchors, curvature):
        anchors = np.asarray(anchors, dtype=PARAM_DTYPE)
        A = np.asarray(curvature, dtype=PARAM_DTYPE)
        if anchors.ndim != 2:
            raise ValueError("anchors must be an (n, d) array")
        if not np.all(np.isfinite(anchors)):
            bad = int(np.flatnonzero(~np.isfinite(anchors).all(axis=1))[0])
            raise ValueError(f"anchor {bad} is not finite")
        n, d = anchors.shape
        if A.shape != (d, d):
            raise ValueError(f"curvature must be ({d}, {d}), got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("curvature must be finite")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("curvature must be symmetric")
        eigs = np.linalg.eigvalsh(A)
        if eigs.min() < -1e-12 * max(1.0, eigs.max()):
            raise ValueError("curvature must be positive semidefinite")
        super().__init__(n, d)
        self.anchors = anchors
        self.curvature = A
        lam_max = float(eigs.max())
        self.lipschitz_constants = np.full(n, lam_max)
        # Precompute A a_i and the per-sample constant terms so batch
        # values cost O(d^2 + b) rather than O(b d^2).
        self._Aa = anchors @ A
        self._const = 0.5 * np.einsum("ij,ij->i", anchors, self._Aa)
        # Full-batch quantities reuse the same mean reduction as the
        # batch path so a batch covering all samples is bit-identical
        # to the full-gradient route.
        self._Aa_mean = self._Aa.mean(axis=0)
        self.mean_anchor = anchors.mean(axis=0)
        dev = self._Aa - self._Aa_mean
        self.sigma_sq = float(np.mean(np.einsum("ij,ij->i", dev, dev)))

    @property
    def minimizer(self):
        return self.mean_anchor.copy()

    def batch_value(self, x, indices):
        indices = self._check_indices(indices)
        Ax = self.curvature @ x
        return float(
            0.5 * x @ Ax
            - x @ self._Aa[indices].mean(axis=0)
            + self._const[indices].mean()
        )

    def batch_grad(self, x, indices):
        indices = self._check_indices(indices)
        g = self.curvature @ x - self._Aa[indices].mean(axis=0)
        if not np.all(np.isfinite(g)):
            bad = int(indices[0])
            raise FloatingPointError(f"non-finite gradient in batch starting at sample {bad}")
        return g

    def full_value(self, x):
        Ax = self.curvature @ x
        return float(0.5 * x @ Ax - x @ self._Aa_mean + self._const.mean())

    def full_grad(self, x):
        return self.curvature @ x - self._Aa_mean


def random_quadratic(n, d, spectrum, anchor_scale=1.0, seed=0, rotate=False):
    """Quadratic ensemble with Gaussian anchors and a chosen curvature spectrum.

    `spectrum` is a scalar (isotropic curvature) or a length-d eigenvalue
    list; with `rotate` the eigenbasis is a random rotation instead of
    the coordinate axes.
    """
    rng = np.random.default_rng(seed)
    spec = np.asarray(spectrum, dtype=PARAM_DTYPE)
    if spec.ndim == 0:
        spec = np.full(d, float(spec))
    if spec.shape != (d,):
        raise ValueError(f"spectrum must be scalar or length {d}")
    if rotate:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        A = (q * spec) @ q.T
        A = 0.5 * (A + A.T)
    else:
        A = np.diag(spec)
    anchors = anchor_scale * rng.standard_normal((n, d))
    return QuadraticEnsemble(anchors, A)


class TinyMlpEnsemble(LossEnsemble):
    """Per-sample losses of a small dense network on fixed data.

    Hidden layers use tanh so every f_i is twice differentiable; the
    output layer is linear.  `loss` selects softmax cross-entropy or
    one-hot squared error.  Parameters live in a single flat vector,
    laid out layer by layer as W (out x in) then b.  Backprop is written
    out by hand and vectorized over the batch.
    """

    kind = "tiny-mlp"
    LOSSES = ("softmax", "squared")
    MAX_PARAMS = 10_000
    MAX_SAMPLES = 10_000

    def __init__(self, inputs, labels, sizes, loss="softmax",
                 eval_inputs=None, eval_labels=None):
        inputs = np.asarray(inputs, dtype=PARAM_DTYPE)
        labels = np.asarray(labels)
        if loss not in self.LOSSES:
            raise ValueError(f"unknown loss {loss!r}; choose from {self.LOSSES}")
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise ValueError("inputs must be (n, d_in) with one integer label per row")
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or sizes[0] != inputs.shape[1]:
            raise ValueError("sizes must start at the input width and have >= 2 entries")
        if labels.min() < 0 or labels.max() >= sizes[-1]:
            raise ValueError("labels must lie in [0, output width)")
        n = inputs.shape[0]
        d = sum(sizes[l + 1] * (sizes[l] + 1) for l in range(len(sizes) - 1))
        if d > self.MAX_PARAMS or n > self.MAX_SAMPLES:
            raise ValueError(f"ensemble too large: n={n}, params={d}")
        super().__init__(n, d)
        self.sizes = sizes
        self.loss = loss
        self.inputs = inputs
        self.labels = labels.astype(np.int64)
        self._eval_inputs = eval_inputs
        self._eval_labels = eval_labels

    def unpack(self, x):
        """Split the flat vector into (W, b) pairs."""
        layers, pos = [], 0
        for l in range(len(self.sizes) - 1):
            fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
            w = x[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = x[pos:pos + fan_out]
            pos += fan_out
            layers.append((w, b))
        return layers

    def _forward(self, x, X):
        layers = self.unpack(x)
        hidden = [X]
        h = X
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
            hidden.append(h)
        w, b = layers[-1]
        z = h @ w.T + b
        return layers, hidden, z

    def _losses(self, z, y):
        if self.loss == "softmax":
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
            return lse - z[np.arange(len(y)), y]
        onehot = np.zeros_like(z)
        onehot[np.arange(len(y)), y] = 1.0
        return 0.5 * np.sum((z - onehot) ** 2, axis=1)

    def _dz(self, z, y):
        onehot = np.zeros_like(z)
        onehot[np.arange(len(y)), y] = 1.0
        if self.loss == "softmax":
            zmax = z.max(axis=1, keepdims=True)
            e = np.exp(z - zmax)
            return e / e.sum(axis=1, keepdims=True) - onehot
        return z - onehot

    def batch_value(self, x, indices):
        indices = self._check_indices(indices)
        _, _, z = self._forward(x, self.inputs[indices])
        return float(self._losses(z, self.labels[indices]).mean())

    def batch_grad(self, x, indices):
        indices = self._check_indices(indices)
        X, y = self.inputs[indices], self.labels[indices]
        layers, hidden, z = self._forward(x, X)
        b = len(indices)
        delta = self._dz(z, y) / b  # mean over the batch folded in here
        grads = [None] * len(layers)
        for l in range(len(layers) - 1, -1, -1):
            w, _ = layers[l]
            grads[l] = (delta.T @ hidden[l], delta.sum(axis=0))
            if l > 0:
                delta = (delta @ w) * (1.0 - hidden[l] ** 2)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError(f"non-finite gradient in batch starting at sample {int(indices[0])}")
        return flat

    def eval_value(self, x):
        if self._eval_inputs is None:
            return self.full_value(x)
        _, _, z = self._forward(x, self._eval_inputs)
        return float(self._losses(z, self._eval_labels).mean())


def glorot_init(sizes, rng):
    """Flat Glorot-uniform parameter vector for a TinyMlpEnsemble layout."""
    parts = []
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def make_tiny_mlp_ensemble(n, sizes, seed=0, loss="softmax", label_noise=0.0,
                           blob_scale=0.7, eval_fraction=0.25):
    """Tiny MLP ensemble on Gaussian blob data with a held-out split.

    One blob per output class, centers on a circle of radius 2 in a
    random 2-d-and-up embedding; `label_noise` flips that fraction of
    training labels uniformly at random so the landscape has basins of
    genuinely different sharpness.
    """
    rng = np.random.default_rng(seed)
    d_in, classes = int(sizes[0]), int(sizes[-1])
    centers = np.zeros((classes, d_in))
    angles = 2 * np.pi * np.arange(classes) / classes
    centers[:, 0] = 2.0 * np.cos(angles)
    centers[:, min(1, d_in - 1)] = 2.0 * np.sin(angles)

    def draw(count):
        y = rng.integers(0, classes, size=count)
        X = centers[y] + blob_scale * rng.standard_normal((count, d_in))
        return X, y

    X, y = draw(n)
    if label_noise > 0.0:
        flip = rng.random(n) < label_noise
        y = np.where(flip, rng.integers(0, classes, size=n), y)
    n_eval = max(1, int(round(eval_fraction * n)))
    X_eval, y_eval = draw(n_eval)
    return TinyMlpEnsemble(X, y, sizes, loss=loss,
                           eval_inputs=X_eval, eval_labels=y_eval)


def finite_difference_gradient(fun, x, step_scale=1e-6):
    """Central-difference gradient with per-coordinate step 1e-6 (1 + |x_j|)."""
    x = np.asarray(x, dtype=PARAM_DTYPE)
    g = np.zeros_like(x)
    for j in range(x.size):
        h = step_scale * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g
