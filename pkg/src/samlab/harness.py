"""Experiment orchestration: configs, the training loop, and output.

A run executes the mini-batch loop (draw batch, form the sharpness-aware
direction, step, advance the schedules) for exactly the scheduled number
of steps, recording per-step scalars and cadence-gated diagnostics that
each cost full-gradient evaluations.  Randomness is split into purpose
streams derived from (seed, tag): batch sampling, Monte-Carlo noise
probes, and sharpness restarts never share a stream, so toggling a
diagnostic cannot change the trajectory and results are independent of
thread count.

Config files are JSON.  Keys:

    ensemble: {kind: "quadratic", n, d, seed, anchor_scale, spectrum, rotate}
              {kind: "tiny-mlp", n, layers, seed, loss, label_noise}
    sam:      {rho, alpha, base_update, zero_grad_threshold,
               beta1, beta2, weight_decay, adam_eps}
    batch:    {stages: [[b, epochs], ...]}
    lr:       {kind: "constant", eta} | {kind: "cosine", lo, hi}
              | {kind: "linear", lo, hi}
              | {kind: "warmup", init_lr, warmup_epochs, inner: {...}}
    epochs:   optional; must equal the stage total when present
    seeds:    [1, 2, 3]
    init:     {kind: "offset", distance, seed} (quadratic)
              | {kind: "normal", scale, seed} | {kind: "glorot", seed}
              | {x0: [...]}
    sampling: "replacement" (default) | "shuffle"
    diagnostics: {cadence: 0 (auto), noise_trials: 0, perturbed_loss: false,
                  sharpness: false | {radius, ascent_steps, restarts, step_fraction}}
    epsilon:  optional convergence target
    out_dir:  optional output directory
"""

import copy
import hashlib
import itertools
import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .diagnostics import (GradBoundEstimates, SharpnessSpec, adaptive_sharpness,
                          default_cadence, mc_noise_norm)
from .ensemble import BatchSampler, glorot_init, make_tiny_mlp_ensemble, random_quadratic
from .sam import SamConfig, decompose, direction_parts, perturbation, sam_gradient
from .sam import step as apply_step
from .schedules import BatchSchedule, ConstantLr, CosineLr, LinearLr, WarmupLr
from .theory import convergence_verdict

CSV_COLUMNS = (
    "step", "epoch", "batch_size", "lr", "minibatch_loss", "full_loss",
    "sam_grad_norm", "noise_norm", "noise_mean", "noise_se", "G_hat", "G_perp_hat",
)
_INT_COLUMNS = ("step", "epoch", "batch_size")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DivergenceError(RuntimeError):
    """Trajectory left the finite range; message carries the step index."""


@dataclass(frozen=True)
class RunConfig:
    ensemble: dict
    sam: SamConfig
    batch: BatchSchedule
    lr: object
    epochs: int
    seeds: tuple
    cadence: int
    noise_trials: int
    log_perturbed_loss: bool
    sampling: str
    init: dict
    sharpness: SharpnessSpec | None
    epsilon: float | None
    out_dir: str | None
    raw: dict


def config_hash(raw):
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def build_ensemble(spec):
    kind = spec.get("kind", "quadratic")
    if kind == "quadratic":
        return random_quadratic(
            n=int(spec["n"]), d=int(spec["d"]),
            spectrum=spec.get("spectrum", 1.0),
            anchor_scale=float(spec.get("anchor_scale", 1.0)),
            seed=int(spec.get("seed", 0)),
            rotate=bool(spec.get("rotate", False)),
        )
    if kind == "tiny-mlp":
        return make_tiny_mlp_ensemble(
            n=int(spec["n"]), sizes=spec["layers"],
            seed=int(spec.get("seed", 0)),
            loss=spec.get("loss", "softmax"),
            label_noise=float(spec.get("label_noise", 0.0)),
        )
    raise ConfigError(f"unknown ensemble kind {kind!r}")


def _build_lr(spec, batch_sched):
    kind = spec.get("kind", "constant")
    total_epochs = batch_sched.total_epochs
    first_k = batch_sched.steps_in_epoch(0)
    if kind == "constant":
        return ConstantLr(float(spec["eta"]))
    if kind == "cosine":
        epochs = int(spec.get("epochs", total_epochs))
        return CosineLr(float(spec["lo"]), float(spec["hi"]), first_k, epochs)
    if kind == "linear":
        total = int(spec.get("total", batch_sched.total_steps()))
        return LinearLr(float(spec["lo"]), float(spec["hi"]), total)
    if kind == "warmup":
        warm = int(spec["warmup_epochs"])
        _require(warm < total_epochs, "warmup_epochs must leave room for the inner schedule")
        inner_spec = dict(spec["inner"])
        inner_kind = inner_spec.get("kind", "constant")
        if inner_kind == "cosine":
            inner_spec.setdefault("epochs", total_epochs - warm)
        elif inner_kind == "linear":
            inner_spec.setdefault("total", batch_sched.total_steps() - warm * first_k)
        inner = _build_lr(inner_spec, batch_sched)
        return WarmupLr(float(spec["init_lr"]), warm, inner, steps_per_epoch=first_k)
    raise ConfigError(f"unknown lr kind {kind!r}")


def config_from_dict(raw):
    """Validate a JSON config dict and build the run objects."""
    try:
        _require(isinstance(raw, dict), "config must be a JSON object")
        _require("ensemble" in raw, "config needs an 'ensemble' section")
        _require("batch" in raw and "stages" in raw["batch"], "config needs batch.stages")
        _require("lr" in raw, "config needs an 'lr' section")
        ens_spec = raw["ensemble"]
        _require(ens_spec.get("kind", "quadratic") in ("quadratic", "tiny-mlp"),
                 f"unknown ensemble kind {ens_spec.get('kind')!r}")
        n = int(ens_spec["n"])
        batch = BatchSchedule(tuple((int(b), int(e)) for b, e in raw["batch"]["stages"]), n)
        if "epochs" in raw:
            _require(int(raw["epochs"]) == batch.total_epochs,
                     f"epochs = {raw['epochs']} does not match the stage total {batch.total_epochs}")
        sam_spec = raw.get("sam", {})
        sam = SamConfig(
            rho=float(sam_spec.get("rho", 0.0)),
            alpha=float(sam_spec.get("alpha", 0.0)),
            zero_grad_threshold=float(sam_spec.get("zero_grad_threshold", 1e-12)),
            base_update=sam_spec.get("base_update", "sgd"),
            beta1=float(sam_spec.get("beta1", 0.9)),
            beta2=float(sam_spec.get("beta2", 0.999)),
            weight_decay=float(sam_spec.get("weight_decay", 0.0)),
            adam_eps=float(sam_spec.get("adam_eps", 1e-8)),
        )
        lr = _build_lr(raw["lr"], batch)
        seeds = tuple(int(s) for s in raw.get("seeds", [0]))
        _require(len(seeds) >= 1, "need at least one seed")
        diag = raw.get("diagnostics", {})
        cadence = int(diag.get("cadence", 0))
        _require(cadence >= 0, "cadence must be nonnegative (0 = auto)")
        noise_trials = int(diag.get("noise_trials", 0))
        _require(noise_trials == 0 or noise_trials >= 100,
                 "noise_trials must be 0 (off) or at least 100")
        sharp_spec = diag.get("sharpness", False)
        if sharp_spec is False or sharp_spec is None:
            sharpness = None
        elif sharp_spec is True:
            sharpness = SharpnessSpec()
        else:
            sharpness = SharpnessSpec(
                radius=float(sharp_spec.get("radius", 2e-4)),
                ascent_steps=int(sharp_spec.get("ascent_steps", 20)),
                restarts=int(sharp_spec.get("restarts", 5)),
                step_fraction=float(sharp_spec.get("step_fraction", 0.25)),
            )
        sampling = raw.get("sampling", "replacement")
        _require(sampling in BatchSampler.MODES, f"sampling must be one of {BatchSampler.MODES}")
        init = raw.get("init", {})
        if "x0" not in init:
            _require(init.get("kind", "offset") in ("offset", "normal", "glorot"),
                     f"unknown init kind {init.get('kind')!r}")
        epsilon = raw.get("epsilon")
        if epsilon is not None:
            epsilon = float(epsilon)
            _require(epsilon > 0, "epsilon must be positive")
        return RunConfig(
            ensemble=ens_spec, sam=sam, batch=batch, lr=lr,
            epochs=batch.total_epochs, seeds=seeds, cadence=cadence,
            noise_trials=noise_trials,
            log_perturbed_loss=bool(diag.get("perturbed_loss", False)),
            sampling=sampling, init=init,
            sharpness=sharpness, epsilon=epsilon,
            out_dir=raw.get("out_dir"), raw=raw,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def initial_point(config, ens):
    """Starting parameters; fixed by the config, not the run seed, so
    deterministic cases stay identical across seeds."""
    init = config.init
    if "x0" in init:
        x0 = np.asarray(init["x0"], dtype=float)
        _require(x0.shape == (ens.d,), f"x0 must have length {ens.d}")
        return x0
    kind = init.get("kind", "glorot" if ens.kind == "tiny-mlp" else "offset")
    gen = rngmod.stream(int(init.get("seed", 0)), "init")
    if kind == "offset":
        _require(ens.kind == "quadratic", "offset init needs a quadratic ensemble")
        u = gen.standard_normal(ens.d)
        u /= np.linalg.norm(u)
        return ens.minimizer + float(init.get("distance", 1.0)) * u
    if kind == "normal":
        return float(init.get("scale", 1.0)) * gen.standard_normal(ens.d)
    if kind == "glorot":
        _require(ens.kind == "tiny-mlp", "glorot init needs a tiny-mlp ensemble")
        return glorot_init(ens.sizes, gen)
    raise ConfigError(f"unknown init kind {kind!r}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    batch_size: int
    lr: float
    minibatch_loss: float
    full_loss: float | None = None
    sam_grad_norm: float | None = None
    noise_norm: float | None = None
    noise_mean: float | None = None
    noise_se: float | None = None
    G_hat: float | None = None
    G_perp_hat: float | None = None
    perturbed_loss: float | None = None


@dataclass(frozen=True)
class RunTrace:
    config_hash: str
    seed: int
    records: tuple
    final_sharpness: float | None
    final_eval_loss: float
    wall_clock: float

    def column(self, name):
        """Column as a float array with NaN in unsampled slots."""
        vals = [getattr(r, name) for r in self.records]
        return np.array([np.nan if v is None else v for v in vals], dtype=float)

    def recorded_sam_grad_norms(self):
        norms = self.column("sam_grad_norm")
        steps = np.array([r.step for r in self.records])
        keep = np.isfinite(norms)
        return steps[keep], norms[keep]

    @property
    def terminal_full_loss(self):
        return self.records[-1].full_loss


def run(config, seed):
    """Execute one trajectory; deterministic given (config, seed)."""
    started = time.perf_counter()
    ens = build_ensemble(config.ensemble)
    x = initial_point(config, ens)
    sampler = BatchSampler(ens.n, rngmod.stream(seed, "batches"), config.sampling)
    total = config.batch.total_steps()
    cadence = config.cadence or default_cadence(total)
    chash = config_hash(config.raw)
    est = GradBoundEstimates()
    adam_state = None
    records = []
    t = 0
    for epoch in range(config.batch.total_epochs):
        b = config.batch.batch_at(epoch)
        for mb in sampler.epoch_batches(b):
            eta = config.lr.rate(epoch, t)
            g, g_sam, perp, d = direction_parts(ens, x, mb.indices, config.sam)
            mb_loss = ens.batch_value(x, mb.indices)
            extra = {}
            if t % cadence == 0 or t == total - 1:
                full_sam = sam_gradient(ens, x, None, config.sam)
                omega = full_sam - g_sam
                if config.sam.alpha != 0.0:
                    omega = omega + config.sam.alpha * perp
                eps = perturbation(g, config.sam.rho, config.sam.u,
                                   config.sam.zero_grad_threshold)
                perp_actual = decompose(g, g_sam, config.sam.zero_grad_threshold).perpendicular
                perp_norm = float(np.linalg.norm(perp_actual))
                est = GradBoundEstimates(
                    max(est.G_hat,
                        float(np.linalg.norm(ens.full_grad(x + eps))),
                        float(np.linalg.norm(g_sam)),
                        float(np.linalg.norm(full_sam)),
                        perp_norm),
                    max(est.G_perp_hat, perp_norm),
                )
                extra = {
                    "full_loss": ens.full_value(x),
                    "sam_grad_norm": float(np.linalg.norm(full_sam)),
                    "noise_norm": float(np.linalg.norm(omega)),
                    "G_hat": est.G_hat,
                    "G_perp_hat": est.G_perp_hat,
                }
                if config.noise_trials:
                    mean, se = mc_noise_norm(
                        ens, x, b, config.sam, eta, config.noise_trials,
                        seed=rngmod.derive_int(seed, f"mc@{t}"))
                    extra["noise_mean"] = mean
                    extra["noise_se"] = se
                if config.log_perturbed_loss:
                    extra["perturbed_loss"] = ens.full_value(x + eps)
            records.append(StepRecord(
                step=t, epoch=epoch, batch_size=b, lr=eta,
                minibatch_loss=mb_loss, **extra,
            ))
            x, adam_state = apply_step(x, d, eta, config.sam, adam_state)
            if not (np.isfinite(mb_loss) and np.all(np.isfinite(x))):
                raise DivergenceError(f"run diverged at step {t} (non-finite state)")
            t += 1
    sharp = None
    if config.sharpness is not None:
        sharp = adaptive_sharpness(ens, x, config.sharpness,
                                   seed=rngmod.derive_int(seed, "sharpness"))
    return RunTrace(
        config_hash=chash, seed=seed, records=tuple(records),
        final_sharpness=sharp, final_eval_loss=ens.eval_value(x),
        wall_clock=time.perf_counter() - started,
    )


def thread_count():
    env = os.environ.get("SAMLAB_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def run_many(config, seeds=None):
    """All seeds of a config, concurrently when allowed."""
    seeds = tuple(config.seeds if seeds is None else seeds)
    workers = min(thread_count(), len(seeds))
    if workers <= 1 or len(seeds) == 1:
        return [run(config, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run(config, s), seeds))


@dataclass(frozen=True)
class RunAggregate:
    """Per-step mean/min/max across same-config traces."""

    config_hash: str
    seeds: tuple
    mean: dict
    min: dict
    max: dict
    sharpness_values: tuple
    mean_sharpness: float | None
    terminal_losses: tuple
    mean_terminal_loss: float
    eval_losses: tuple
    mean_eval_loss: float

    def recorded_sam_grad_norms(self):
        norms = self.mean["sam_grad_norm"]
        steps = self.mean["step"]
        keep = np.isfinite(norms)
        return steps[keep].astype(int), norms[keep]


def aggregate_runs(traces):
    if not traces:
        raise ValueError("aggregate_runs needs at least one trace")
    chash = traces[0].config_hash
    if any(tr.config_hash != chash for tr in traces):
        raise ValueError("traces come from different configs (hash mismatch)")
    counts = {len(tr.records) for tr in traces}
    if len(counts) != 1:
        raise ValueError("traces have mismatched record counts")
    stacked = {name: np.vstack([tr.column(name) for tr in traces]) for name in CSV_COLUMNS}
    def reduce(fn):
        # nan-aware reductions; all-NaN slices (unsampled steps) stay NaN
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)
            return {k: fn(v, axis=0) for k, v in stacked.items()}
    mean, mn, mx = reduce(np.nanmean), reduce(np.nanmin), reduce(np.nanmax)
    sharp = tuple(tr.final_sharpness for tr in traces)
    have_sharp = [s for s in sharp if s is not None]
    term = tuple(np.nan if tr.terminal_full_loss is None else tr.terminal_full_loss for tr in traces)
    evals = tuple(tr.final_eval_loss for tr in traces)
    return RunAggregate(
        config_hash=chash, seeds=tuple(tr.seed for tr in traces),
        mean=mean, min=mn, max=mx,
        sharpness_values=sharp,
        mean_sharpness=float(np.mean(have_sharp)) if have_sharp else None,
        terminal_losses=term, mean_terminal_loss=float(np.nanmean(term)),
        eval_losses=evals, mean_eval_loss=float(np.mean(evals)),
    )


def _cell(value, column):
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    if column in _INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


def export(obj, fmt, path, config=None, extra=None):
    """Write a trace or aggregate as CSV rows or a JSON summary.

    The CSV schema is fixed; unsampled cadence slots are empty cells.
    Aggregates export their per-step means under the same schema.  The
    JSON summary echoes the config (when supplied), the seed(s), the
    final sharpness, and the convergence verdict when an epsilon target
    is configured.  Exports of the same object are byte-identical.
    """
    if fmt == "csv":
        lines = [",".join(CSV_COLUMNS)]
        if isinstance(obj, RunTrace):
            for rec in obj.records:
                lines.append(",".join(_cell(getattr(rec, c), c) for c in CSV_COLUMNS))
        elif isinstance(obj, RunAggregate):
            rows = len(obj.mean["step"])
            for i in range(rows):
                lines.append(",".join(_cell(float(obj.mean[c][i]), c) for c in CSV_COLUMNS))
        else:
            raise TypeError("export expects a RunTrace or RunAggregate")
        payload = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = json.dumps(summarize(obj, config=config, extra=extra), indent=2) + "\n"
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def summarize(obj, config=None, extra=None):
    """JSON-ready summary of a trace or aggregate."""
    epsilon = config.epsilon if config is not None else None
    out = {"config_hash": obj.config_hash}
    if config is not None:
        out["config"] = config.raw
    if isinstance(obj, RunTrace):
        out.update({
            "type": "trace", "seed": obj.seed,
            "wall_clock_sec": obj.wall_clock,
            "final_sharpness": obj.final_sharpness,
            "final_eval_loss": obj.final_eval_loss,
            "terminal_full_loss": obj.terminal_full_loss,
        })
        if config is not None and config.log_perturbed_loss:
            series = [[r.step, r.perturbed_loss] for r in obj.records
                      if r.perturbed_loss is not None]
            out["perturbed_loss"] = series
    elif isinstance(obj, RunAggregate):
        out.update({
            "type": "aggregate", "seeds": list(obj.seeds),
            "sharpness": list(obj.sharpness_values),
            "mean_sharpness": obj.mean_sharpness,
            "terminal_full_loss": [None if math.isnan(v) else v for v in obj.terminal_losses],
            "mean_terminal_full_loss": obj.mean_terminal_loss,
            "final_eval_loss": list(obj.eval_losses),
            "mean_final_eval_loss": obj.mean_eval_loss,
        })
    else:
        raise TypeError("summarize expects a RunTrace or RunAggregate")
    try:
        achieved, min_norm, argmin = convergence_verdict(obj, epsilon if epsilon else math.inf)
        out["min_sam_grad_norm"] = min_norm
        out["argmin_step"] = argmin
        if epsilon:
            out["epsilon"] = epsilon
            out["epsilon_achieved"] = bool(achieved)
    except ValueError:
        out["min_sam_grad_norm"] = None
    if extra:
        out.update(extra)
    return out


VALID_GRID_KEYS = (
    "sam.rho", "sam.alpha", "sam.base_update", "sam.weight_decay",
    "lr.kind", "lr.eta", "lr.lo", "lr.hi", "lr.init_lr", "lr.warmup_epochs",
    "ensemble.seed", "ensemble.anchor_scale", "ensemble.label_noise",
    "init.seed", "init.distance", "init.scale",
    "epsilon", "sampling",
)


def _apply_override(raw, key, value):
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"grid key {key!r} does not address a config section")
    node[parts[-1]] = value


def sweep(base_raw, grid, seeds=None):
    """Cartesian product of grid overrides, each run over all seeds.

    Returns a list of (overrides dict, RunConfig, RunAggregate) in
    deterministic grid order; an empty grid yields the single base
    config.  `grid` maps dotted config keys to value lists.
    """
    for key in grid:
        if key not in VALID_GRID_KEYS:
            raise ConfigError(
                f"unknown grid key {key!r}; valid keys: {', '.join(VALID_GRID_KEYS)}")
    keys = sorted(grid)
    results = []
    combos = itertools.product(*(grid[k] for k in keys)) if keys else [()]
    for combo in combos:
        raw = copy.deepcopy(base_raw)
        overrides = dict(zip(keys, combo))
        for k, v in overrides.items():
            _apply_override(raw, k, v)
        config = config_from_dict(raw)
        traces = run_many(config, seeds)
        results.append((overrides, config, aggregate_runs(traces)))
    return results


def rank_sweep(results):
    """Ranking tables: (by mean terminal full loss, by mean sharpness)."""
    by_loss = sorted(results, key=lambda row: row[2].mean_terminal_loss)
    with_sharp = [row for row in results if row[2].mean_sharpness is not None]
    by_sharp = sorted(with_sharp, key=lambda row: row[2].mean_sharpness)
    return by_loss, by_sharp
