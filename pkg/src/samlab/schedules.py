"""Batch-size and learning-rate schedules and their aggregate constants.

Batch schedules are stage lists (b_i, E_i) with non-decreasing batch
sizes; the step count of an E_i-epoch stage is ceil(n/b_i) * E_i.
Learning-rate schedules are immutable lookup objects: constant, cosine
(constant within each epoch, decaying across epochs), linear (per-step
decay), and a per-epoch warmup wrapper.

`aggregates` summarizes a schedule by the exact sums of eta_t and
eta_t^2 over the training window t in [0, T-1] together with closed-form
constants H1, H2, H3 intended to satisfy

    T / sum(eta) <= H1  and  sum(eta^2) / sum(eta) <= H2 + H3 / T.

The H1 inequality always holds.  The H2 one rests on replacing discrete
sums by idealized values, and the discrepancy has the wrong sign for
some schedules: the endpoint cosine sum over t in [0, KE] is K - 1, not
0, so cosine schedules with K >= 3 can violate the bound, and the linear
schedule overshoots H2 by O((hi - lo)/T) for every T whenever hi > lo.
`aggregates` verifies both inequalities numerically and raises
ScheduleAlgebraError when the summary constants fail to cover the exact
sums, rather than returning an unsound summary.
"""

import math
from dataclasses import dataclass

import numpy as np


class ScheduleAlgebraError(ValueError):
    """Raised when the closed-form H constants fail to bound the exact sums."""


@dataclass(frozen=True)
class BatchSchedule:
    """Ordered stages of (batch size, epoch count) over an ensemble of size n."""

    stages: tuple
    n: int

    def __post_init__(self):
        stages = tuple((int(b), int(e)) for b, e in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("batch schedule needs at least one stage")
        sizes = [b for b, _ in stages]
        if any(e < 1 for _, e in stages):
            raise ValueError("every stage needs at least one epoch")
        if any(not 1 <= b <= self.n for b in sizes):
            raise ValueError(f"batch sizes must lie in [1, {self.n}]")
        if any(b2 < b1 for b1, b2 in zip(sizes, sizes[1:])):
            raise ValueError("batch sizes must be non-decreasing across stages")

    @property
    def total_epochs(self):
        return sum(e for _, e in self.stages)

    def batch_at(self, epoch):
        """Batch size of the stage containing the (0-indexed) epoch."""
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        acc = 0
        for b, e in self.stages:
            acc += e
            if epoch < acc:
                return b
        raise AssertionError("unreachable")

    def steps_in_epoch(self, epoch):
        return -(-self.n // self.batch_at(epoch))

    def total_steps(self):
        return sum(-(-self.n // b) * e for b, e in self.stages)

    def epoch_of_step(self, step):
        """Epoch containing a global step index (post-hoc bookkeeping)."""
        if step < 0:
            raise ValueError("step must be nonnegative")
        acc = 0
        epoch = 0
        for b, e in self.stages:
            per = -(-self.n // b)
            if step < acc + per * e:
                return epoch + (step - acc) // per
            acc += per * e
            epoch += e
        raise ValueError(f"step {step} beyond total_steps {self.total_steps()}")


def batch_at(sched, epoch):
    return sched.batch_at(epoch)


def total_steps(sched):
    return sched.total_steps()


class LrSchedule:
    """Common surface: `lr_at(step)` on the schedule's own step domain and
    `rate(epoch, step)` as used by the training loop."""

    kind = "abstract"
    lo = 0.0
    hi = 0.0

    def lr_at(self, step):
        raise NotImplementedError

    def rate(self, epoch, step):
        raise NotImplementedError

    def _check_step(self, step, limit):
        if not 0 <= step <= limit:
            raise ValueError(f"step {step} outside [0, {limit}]")


class ConstantLr(LrSchedule):
    kind = "constant"

    def __init__(self, eta):
        if eta < 0:
            raise ValueError("learning rate must be nonnegative")
        self.eta = float(eta)
        self.lo = self.hi = self.eta

    def lr_at(self, step):
        if step < 0:
            raise ValueError("step must be nonnegative")
        return self.eta

    def rate(self, epoch, step):
        return self.eta

    def _rates(self, T):
        return np.full(T, self.eta)


class CosineLr(LrSchedule):
    """Half-cosine decay from hi to lo, held constant within each epoch.

    With K steps per epoch and E epochs the rate at step t is
    lo + (hi - lo)/2 * (1 + cos(floor(t/K) pi / E)) on the domain
    t in [0, KE]; training consumes t in [0, KE - 1].
    """

    kind = "cosine"

    def __init__(self, lo, hi, steps_per_epoch, epochs):
        if not 0 <= lo <= hi:
            raise ValueError("cosine schedule needs 0 <= lo <= hi")
        if steps_per_epoch < 1 or epochs < 1:
            raise ValueError("cosine schedule needs K >= 1 and E >= 1")
        self.lo, self.hi = float(lo), float(hi)
        self.K, self.E = int(steps_per_epoch), int(epochs)

    def lr_at(self, step):
        self._check_step(step, self.K * self.E)
        return self.rate(step // self.K, step)

    def rate(self, epoch, step):
        if not 0 <= epoch <= self.E:
            raise ValueError(f"epoch {epoch} outside [0, {self.E}]")
        return self.lo + 0.5 * (self.hi - self.lo) * (1.0 + math.cos(epoch * math.pi / self.E))

    def _rates(self, T):
        epochs = np.arange(T) // self.K
        return self.lo + 0.5 * (self.hi - self.lo) * (1.0 + np.cos(epochs * np.pi / self.E))


class LinearLr(LrSchedule):
    """Per-step decay from hi at step 0 to lo at step T."""

    kind = "linear"

    def __init__(self, lo, hi, total):
        if not 0 <= lo <= hi:
            raise ValueError("linear schedule needs 0 <= lo <= hi")
        if total < 1:
            raise ValueError("linear schedule needs T >= 1")
        self.lo, self.hi = float(lo), float(hi)
        self.T = int(total)

    def lr_at(self, step):
        self._check_step(step, self.T)
        return (self.lo - self.hi) * step / self.T + self.hi

    def rate(self, epoch, step):
        return self.lr_at(step)

    def _rates(self, T):
        return (self.lo - self.hi) * np.arange(T) / self.T + self.hi


class WarmupLr(LrSchedule):
    """Per-epoch linear ramp from init_lr to the inner schedule's first
    rate over `warmup_epochs` epochs, then the inner schedule shifted to
    start at the end of the ramp."""

    kind = "warmup"

    def __init__(self, init_lr, warmup_epochs, inner, steps_per_epoch=None):
        if init_lr < 0 or warmup_epochs < 1:
            raise ValueError("warmup needs init_lr >= 0 and warmup_epochs >= 1")
        if steps_per_epoch is None:
            steps_per_epoch = getattr(inner, "K", None)
        if steps_per_epoch is None:
            raise ValueError("warmup around a non-cosine inner schedule needs steps_per_epoch")
        self.init_lr = float(init_lr)
        self.warmup_epochs = int(warmup_epochs)
        self.inner = inner
        self.steps_per_epoch = int(steps_per_epoch)
        self.target = inner.rate(0, 0)
        self.lo = min(self.init_lr, inner.lo)
        self.hi = max(self.target, inner.hi)

    def _ramp(self, epoch):
        return self.init_lr + (self.target - self.init_lr) * epoch / self.warmup_epochs

    def lr_at(self, step):
        if step < 0:
            raise ValueError("step must be nonnegative")
        offset = self.warmup_epochs * self.steps_per_epoch
        if step < offset:
            return self._ramp(step // self.steps_per_epoch)
        return self.inner.lr_at(step - offset)

    def rate(self, epoch, step):
        if epoch < self.warmup_epochs:
            return self._ramp(epoch)
        offset = self.warmup_epochs * self.steps_per_epoch
        return self.inner.rate(epoch - self.warmup_epochs, step - offset)


def lr_at(sched, step):
    return sched.lr_at(step)


@dataclass(frozen=True)
class ScheduleAggregates:
    """Exact rate sums over the training window plus the H constants."""

    sum_eta: float
    sum_eta_sq: float
    H1: float
    H2: float
    H3: float
    T: int


def lr_sums(sched, T):
    """Exact (sum eta_t, sum eta_t^2) over t in [0, T-1] by direct summation."""
    rates = sched._rates(int(T))
    return float(rates.sum()), float((rates * rates).sum())


def aggregates(sched, T_or_KE=None):
    """Schedule summary with verified aggregate inequalities.

    Raises ScheduleAlgebraError when the closed-form (H2, H3) pair fails
    to cover the exact sums; see the module docstring for why that is a
    real possibility for cosine (K >= 3) and linear (hi > lo) schedules
    and not necessarily an implementation bug.
    """
    if sched.kind == "constant":
        if T_or_KE is None:
            raise ValueError("constant schedule needs an explicit T")
        T = int(T_or_KE)
        H1, H2, H3 = (math.inf if sched.eta == 0 else 1.0 / sched.eta), sched.eta, 0.0
    elif sched.kind == "cosine":
        T = sched.K * sched.E if T_or_KE is None else int(T_or_KE)
        if T != sched.K * sched.E:
            raise ValueError(f"cosine sums are defined over KE = {sched.K * sched.E} steps")
        s = sched.lo + sched.hi
        H1 = math.inf if s == 0 else 2.0 / s
        H2 = 0.0 if s == 0 else (3 * sched.lo ** 2 + 2 * sched.lo * sched.hi + 3 * sched.hi ** 2) / (4 * s)
        H3 = sched.hi - sched.lo
    elif sched.kind == "linear":
        T = sched.T if T_or_KE is None else int(T_or_KE)
        if T != sched.T:
            raise ValueError(f"linear sums are defined over the schedule's own T = {sched.T}")
        s = sched.lo + sched.hi
        H1 = math.inf if s == 0 else 2.0 / s
        H2 = 0.0 if s == 0 else 2 * (sched.lo ** 2 + sched.lo * sched.hi + sched.hi ** 2) / (3 * s)
        H3 = 0.0
    else:
        raise ValueError(f"no closed-form aggregates for {sched.kind!r} schedules")
    if T < 1:
        raise ValueError("aggregate window needs T >= 1")

    sum_eta, sum_eta_sq = lr_sums(sched, T)
    tol = 1e-9
    if sum_eta > 0:
        lhs1 = T / sum_eta
        if lhs1 > H1 * (1 + tol):
            raise ScheduleAlgebraError(
                f"T/sum(eta) = {lhs1:.12g} exceeds H1 = {H1:.12g}; the schedule violates its summary bound"
            )
        lhs2 = sum_eta_sq / sum_eta
        rhs2 = H2 + H3 / T
        if lhs2 > rhs2 + tol * max(1.0, abs(rhs2)):
            raise ScheduleAlgebraError(
                f"sum(eta^2)/sum(eta) = {lhs2:.12g} exceeds H2 + H3/T = {rhs2:.12g} "
                f"for the {sched.kind} schedule (T = {T}). The closed-form pair "
                "(H2, H3) relies on idealized discrete-sum identities (endpoint "
                "cosine sum 0, Riemann-sum replacement for linear) that fail for "
                "this configuration; the exact sums in this error are trustworthy, "
                "the summary constants are not."
            )
    return ScheduleAggregates(sum_eta, sum_eta_sq, H1, H2, H3, T)
