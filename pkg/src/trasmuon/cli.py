"""Batch entry point: run single experiments, sweep seeds x variants, and
report aggregated tables. Emits CSV traces and JSON summaries; no plotting.

Exit codes: 0 success, 1 validation error, 2 divergence observed, 3 I/O
error. The environment variable TRASMUON_OUTPUT_ROOT, when set, prefixes
every output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    VARIANTS,
    config_for_run,
    load_config,
    resolve_variant,
)
from .metrics import AggregateSummary, aggregate, summarize_run
from .stress import Trajectory, build_problem, run_stress

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

TRACE_COLUMNS = ("step", "loss", "r_max", "r_q95", "c_used_min",
                 "delta_norm", "burst", "degenerate")


def _output_dir(cfg_dir: str) -> Path:
    root = os.environ.get("TRASMUON_OUTPUT_ROOT")
    return Path(root) / cfg_dir if root else Path(cfg_dir)


def _fmt(value) -> str:
    # repr of a Python float is the shortest decimal that round-trips.
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace(path: Path, traj: Trajectory) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for s in traj.steps:
        lines.append(",".join(_fmt(v) for v in (
            s.step, s.loss, s.r_max, s.r_q95, s.c_used_min,
            s.delta_norm, s.burst, s.degenerate)))
    path.write_text("\n".join(lines) + "\n")


def execute_run(cfg: ExperimentConfig) -> tuple[Trajectory, dict]:
    """Run one experiment and return its trajectory plus summary payload."""
    step_name, hyper = resolve_variant(cfg.optimizer_name, cfg.hyper)
    problem = build_problem(cfg.problem_d, cfg.problem_kappa,
                            cfg.problem_fix_v, cfg.problem_seed)
    traj, _ = run_stress(problem, step_name, hyper, cfg.burst,
                         cfg.total_steps, cfg.init_seed)
    summary = summarize_run(traj.losses(), cfg.spike_rule, diverged=traj.diverged)
    payload = {
        "version": __version__,
        "config": cfg.to_dict(),
        "summary": dataclasses.asdict(summary),
    }
    return traj, payload


def _write_run_outputs(cfg: ExperimentConfig, out_dir: Path) -> tuple[dict, bool]:
    traj, payload = execute_run(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.output_trace:
        write_trace(out_dir / "trace.csv", traj)
    (out_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload, traj.diverged


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc, ConfigError) else EXIT_IO
    try:
        payload, diverged = _write_run_outputs(cfg, _output_dir(cfg.output_directory))
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if diverged:
        print("run diverged; outputs written", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _sweep_cell(task):
    cfg, variant, seed, out_dir = task
    run_cfg = config_for_run(cfg, variant, seed)
    try:
        payload, diverged = _write_run_outputs(run_cfg, Path(out_dir))
        return {"variant": variant, "seed": seed, "ok": True,
                "diverged": diverged, "summary": payload["summary"]}
    except Exception as exc:  # recorded per-run; the sweep continues
        return {"variant": variant, "seed": seed, "ok": False,
                "diverged": False, "error": str(exc)}


def sweep(cfg: ExperimentConfig, seeds: list[int], variants: list[str],
          parallel: int = 1, base_dir: Path | None = None) -> tuple[dict, list[dict]]:
    """Run the (variant x seed) cross product and aggregate per variant.

    Returns (aggregate payload, per-run records). Deterministic regardless
    of ``parallel``: results are collected in task order.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    if not seeds or not variants:
        raise ConfigError("sweep requires at least one seed and one variant")
    base = base_dir if base_dir is not None else _output_dir(cfg.output_directory)
    tasks = [(cfg, v, s, str(base / v / f"seed_{s}")) for v in variants for s in seeds]
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as ex:
            records = list(ex.map(_sweep_cell, tasks))
    else:
        records = [_sweep_cell(t) for t in tasks]

    agg: dict = {"version": __version__, "seeds": seeds, "variants": {}}
    for v in variants:
        ok = [r for r in records if r["variant"] == v and r["ok"]]
        if not ok:
            agg["variants"][v] = {"failed": True}
            continue
        agg["variants"][v] = {
            "spike_count": dataclasses.asdict(
                aggregate([r["summary"]["spike_count"] for r in ok])),
            "final_loss": dataclasses.asdict(
                aggregate([r["summary"]["final_loss"] for r in ok])),
            "n_diverged": sum(r["diverged"] for r in ok),
        }
    return agg, records


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        agg, records = sweep(cfg, seeds, variants, parallel=args.parallel)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    base = _output_dir(cfg.output_directory)
    base.mkdir(parents=True, exist_ok=True)
    (base / "aggregate.json").write_text(
        json.dumps(agg, indent=2, sort_keys=True) + "\n")
    for r in records:
        if not r["ok"]:
            print(f"run failed: variant={r['variant']} seed={r['seed']}: "
                  f"{r['error']}", file=sys.stderr)
    if any(v.get("failed") for v in agg["variants"].values()):
        print("error: all runs failed for at least one variant", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _fmt_agg(a: dict, as_int: bool) -> str:
    if as_int:
        def f(x):
            return str(int(x)) if float(x).is_integer() else f"{x:g}"
    else:
        def f(x):
            return f"{x:.3g}"
    return f"{f(a['median'])} ({f(a['iqr_low'])},{f(a['iqr_high'])})"


def cmd_report(args) -> int:
    try:
        payload = json.loads(Path(args.aggregate).read_text())
        variants = payload["variants"]
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: malformed aggregate file: missing or bad field {exc}",
              file=sys.stderr)
        return EXIT_VALIDATION
    if not variants:
        print("error: aggregate contains no variants", file=sys.stderr)
        return EXIT_VALIDATION
    rows = []
    for name, entry in variants.items():
        if entry.get("failed"):
            rows.append((name, "failed", "failed"))
            continue
        try:
            rows.append((name,
                         _fmt_agg(entry["spike_count"], as_int=True),
                         _fmt_agg(entry["final_loss"], as_int=False)))
        except KeyError as exc:
            print(f"error: malformed aggregate file: missing field {exc} "
                  f"for variant {name!r}", file=sys.stderr)
            return EXIT_VALIDATION
    widths = [max(len(r[i]) for r in rows + [("Method", "Spike Count", "Final Loss")])
              for i in range(3)]
    header = ("Method".ljust(widths[0]), "Spike Count".ljust(widths[1]),
              "Final Loss".ljust(widths[2]))
    print("  ".join(header))
    print("  ".join("-" * w for w in widths))
    for r in rows:
        print("  ".join(r[i].ljust(widths[i]) for i in range(3)))
    print("(median with (q25,q75); lower is better)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trasmuon",
        description="Orthogonalized-momentum optimizer stress benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a seeds x variants cross product")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--seeds", required=True,
                         help="comma-separated integer seeds")
    p_sweep.add_argument("--variants", required=True,
                         help=f"comma-separated names from: {', '.join(VARIANTS)}")
    p_sweep.add_argument("--parallel", type=int, default=1,
                         help="number of worker processes")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="print a table from aggregate.json")
    p_report.add_argument("aggregate")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
