"""Command-line interface.

Subcommands:
    run        execute one config over its seeds, write CSV/JSON/figures
    sweep      Cartesian grid of config overrides, ranked summary
    check      built-in verification checks (bounds, schedules, windows)
    sharpness  adaptive sharpness of a saved parameter vector

Exit codes: 0 success, 1 failed checks or a diverged/failed run,
2 usage or configuration errors.
"""

import argparse
import json
import os
import sys

import numpy as np

from .checks import CHECK_NAMES, run_checks
from .diagnostics import SharpnessSpec, adaptive_sharpness
from .harness import (ConfigError, DivergenceError, aggregate_runs, build_ensemble,
                      config_hash, export, load_config, rank_sweep, run_many,
                      summarize, sweep)


def _parse_seeds(text):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise ConfigError(f"bad --seeds value {text!r}; expected e.g. 1,2,3")


def _parse_grid(entries):
    grid = {}
    for entry in entries or []:
        if "=" not in entry:
            raise ConfigError(f"bad --grid entry {entry!r}; expected KEY=V1,V2,...")
        key, _, values = entry.partition("=")
        parsed = []
        for item in values.split(","):
            item = item.strip()
            try:
                parsed.append(json.loads(item))
            except json.JSONDecodeError:
                parsed.append(item)
        grid[key.strip()] = parsed
    return grid


def _write_outputs(config, traces, agg, out_dir, label=""):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for tr in traces:
        paths.append(export(tr, "csv", os.path.join(out_dir, f"trace_seed{tr.seed}.csv")))
    paths.append(export(agg, "csv", os.path.join(out_dir, "aggregate.csv")))
    paths.append(export(agg, "json", os.path.join(out_dir, "summary.json"), config=config))
    from .plots import plot_run
    fig = plot_run(agg, os.path.join(out_dir, "report.png"),
                   epsilon=config.epsilon, title=label or None)
    paths.append(fig)
    return paths


def cmd_run(args):
    config = load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else config.seeds
    out_dir = args.out or config.out_dir or os.path.join("runs", config_hash(config.raw))
    traces = run_many(config, seeds)
    agg = aggregate_runs(traces)
    paths = _write_outputs(config, traces, agg, out_dir)
    for tr in traces:
        sharp = "-" if tr.final_sharpness is None else f"{tr.final_sharpness:.4g}"
        print(f"seed {tr.seed}: terminal full loss {tr.terminal_full_loss:.6g}, "
              f"eval loss {tr.final_eval_loss:.6g}, sharpness {sharp}, "
              f"{tr.wall_clock:.2f}s")
    summary = summarize(agg, config=config)
    if config.epsilon:
        verdict = "achieved" if summary.get("epsilon_achieved") else "NOT achieved"
        print(f"epsilon {config.epsilon:g} {verdict}: min ‖∇f̂‖ = "
              f"{summary['min_sam_grad_norm']:.4g} at step {summary['argmin_step']}")
    print("wrote: " + ", ".join(paths))
    return 0


def cmd_sweep(args):
    config_path = args.config
    with open(config_path) as fh:
        base_raw = json.load(fh)
    grid = _parse_grid(args.grid)
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    out_dir = args.out or base_raw.get("out_dir") or os.path.join(
        "runs", "sweep-" + config_hash(base_raw))
    results = sweep(base_raw, grid, seeds)
    os.makedirs(out_dir, exist_ok=True)

    keys = sorted(grid)
    rows = ["combo," + ",".join(keys) + ",mean_terminal_full_loss,mean_sharpness,min_sam_grad_norm"]
    for i, (overrides, cfg, agg) in enumerate(results):
        combo_dir = os.path.join(out_dir, f"combo_{i:03d}")
        export(agg, "csv", os.path.join(combo_dir, "aggregate.csv"))
        export(agg, "json", os.path.join(combo_dir, "summary.json"), config=cfg,
               extra={"overrides": overrides})
        summ = summarize(agg)
        sharp = "" if agg.mean_sharpness is None else repr(agg.mean_sharpness)
        min_norm = summ.get("min_sam_grad_norm")
        rows.append(",".join(
            [str(i)] + [json.dumps(overrides[k]) for k in keys]
            + [repr(agg.mean_terminal_loss), sharp,
               "" if min_norm is None else repr(min_norm)]))
    table_path = os.path.join(out_dir, "sweep.csv")
    with open(table_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")

    by_loss, by_sharp = rank_sweep(results)
    print(f"{len(results)} grid points x {len(results[0][2].seeds)} seeds")
    print("ranked by mean terminal full loss:")
    for overrides, _, agg in by_loss:
        print(f"  {agg.mean_terminal_loss:.6g}  {overrides}")
    if by_sharp:
        print("ranked by mean sharpness:")
        for overrides, _, agg in by_sharp:
            print(f"  {agg.mean_sharpness:.6g}  {overrides}")
    best_over, _, best_agg = by_loss[0]
    from .plots import plot_run
    fig = plot_run(best_agg, os.path.join(out_dir, "report.png"),
                   title=f"best combo: {best_over}" if best_over else "base config")
    print(f"wrote: {table_path}, {fig}, per-combo outputs under {out_dir}/combo_*/")
    return 0


def cmd_check(args):
    rows = run_checks(args.name, out_dir=args.out)
    failed = 0
    for row in rows:
        status = "PASS" if row.passed else "FAIL"
        failed += 0 if row.passed else 1
        print(f"{status}  {row.name}: {row.detail}")
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


def cmd_sharpness(args):
    config = load_config(args.config)
    ens = build_ensemble(config.ensemble)
    if args.checkpoint.endswith(".npy"):
        x = np.load(args.checkpoint)
    else:
        with open(args.checkpoint) as fh:
            x = np.asarray(json.load(fh), dtype=float)
    spec = config.sharpness or SharpnessSpec()
    value = adaptive_sharpness(ens, x, spec, seed=args.seed)
    print(f"adaptive sharpness (radius {spec.radius:g}): {value:.6g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="samlab",
        description="mini-batch sharpness-aware optimization lab: runs, sweeps, checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one config over its seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of config overrides")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", action="append", default=[],
                   help="KEY=V1,V2 (repeatable), e.g. sam.rho=0,0.001")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="built-in verification checks")
    p.add_argument("name", choices=CHECK_NAMES + ("all",))
    p.add_argument("--out", default=None, help="directory for check figures")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sharpness", help="sharpness of a saved parameter vector")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, help=".npy or JSON array of parameters")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sharpness)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
