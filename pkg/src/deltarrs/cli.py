"""Command-line entry point for the whole pipeline.

Subcommands: ``atlas`` (orientation-workspace maps), ``optimize``
(geometric design search), ``train``, ``eval``, ``ablate`` and
``export-curves`` (plot-ready CSV from a training log).  Every run
directory receives exactly one ``manifest.json`` holding the hash of
the effective configuration, the applied command-line overrides, and
the only timestamps the tool ever writes; all primary outputs are
byte-stable for a fixed configuration.

Exit codes: 0 success, 1 user error (bad flags, malformed config,
missing files), 2 internal fault.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import (OrientationGrid, SIGMA_OMEGA, compute_atlas,
                    optimize_design, to_dimensionless)
from .config import ConfigError, RunConfig, dump_config, load_config
from .env import TracedInsertionEnv
from .evaluate import (EvalError, EvalProtocol, MetricsTable, evaluate,
                       run_ablation_suite, write_metrics_csv)
from .trainer import run_training


class UserError(ValueError):
    """Invalid invocation or input; reported without a traceback."""


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def write_manifest(out_dir: Path, subcommand: str, cfg: RunConfig,
                   overrides: dict) -> None:
    seeds = sorted({cfg.train.seed, *cfg.eval.seeds})
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash(cfg),
        "seed_set": seeds,
        "code_version": __version__,
        "output_dir": str(out_dir),
        "overrides": overrides,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        return load_config(path)
    return RunConfig()


# ------------------------------------------------------------- subcommands


def cmd_atlas(args) -> int:
    cfg = _load(args)
    cfg.validate()
    out = Path(args.out)
    grid = OrientationGrid(step=math.radians(args.step_deg), z=args.z)
    result = compute_atlas(cfg.rrs, grid, SIGMA_OMEGA)
    write_manifest(out, "atlas", cfg, _overrides(args, ("z", "step_deg")))
    with open(out / "atlas.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta_x", "theta_y", "sigma_min", "kappa",
                         "in_omega"])
        tx, ty = np.meshgrid(result.theta_x, result.theta_y, indexing="ij")
        it = zip(tx.ravel(), ty.ravel(),
                 result.sigma_map.ravel(), result.kappa_map.ravel(),
                 result.in_omega.ravel())
        for tx, ty, sig, kap, mem in it:
            writer.writerow([f"{tx:.10g}", f"{ty:.10g}", f"{sig:.10g}",
                             f"{kap:.10g}", int(mem)])
    with open(out / "atlas_summary.json", "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_optimize(args) -> int:
    cfg = _load(args)
    cfg.validate()
    out = Path(args.out)
    grid = OrientationGrid(step=math.radians(args.step_deg), z=args.z,
                           jitter_seed=0)
    result = optimize_design(to_dimensionless(cfg.rrs), grid)
    write_manifest(out, "optimize", cfg, _overrides(args, ("z", "step_deg")))
    geometry = {name: getattr(result.geometry, name)
                for name in ("base_radius", "platform_radius",
                             "proximal_len", "distal_len",
                             "h_min", "h_max")}
    with open(out / "optimized_geometry.json", "w", encoding="utf-8") as fh:
        json.dump(geometry, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = {
        "initial": result.initial_atlas.summary(),
        "optimized": result.atlas.summary(),
        "improvement_pct": result.improvement_pct(),
        "area_mean": result.area_mean,
        "area_std": result.area_std,
        "seed_areas": result.seed_areas,
        "iterations": result.iterations,
    }
    with open(out / "optimize_summary.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _apply_train_flags(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.steps is not None:
        train = replace(train, total_steps=args.steps)
    if args.ablate:
        flags = [f.strip() for f in args.ablate.split(",") if f.strip()]
        unknown = [f for f in flags if f not in train.ABLATION_FLAGS]
        if unknown:
            raise UserError(
                f"unknown ablation flags {unknown}; choose from "
                f"{list(train.ABLATION_FLAGS)}")
        train = replace(train, **{f: False for f in flags})
    return replace(cfg, train=train)


def cmd_train(args) -> int:
    cfg = _apply_train_flags(_load(args), args)
    cfg.validate()
    out = Path(args.out)
    write_manifest(out, "train", cfg,
                   _overrides(args, ("seed", "steps", "ablate", "trace")))
    env = None
    trace_fh = None
    try:
        if args.trace:
            out.mkdir(parents=True, exist_ok=True)
            trace_fh = open(out / "trace.jsonl", "w", encoding="utf-8")

            def sink(record):
                trace_fh.write(json.dumps(record, sort_keys=True) + "\n")

            env = TracedInsertionEnv(cfg.delta, cfg.rrs, cfg.task, sink)
        run_training(cfg, out, env=env)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    cfg.validate()
    checkpoint = None
    if args.source == "checkpoint":
        if not args.checkpoint:
            raise UserError("--checkpoint is required with the checkpoint "
                            "source")
        checkpoint = Path(args.checkpoint)
        if not checkpoint.exists():
            raise UserError(f"checkpoint not found: {checkpoint}")
    protocol = EvalProtocol(
        episodes=args.episodes if args.episodes is not None
        else cfg.eval.episodes,
        seeds=args.seeds if args.seeds is not None else len(cfg.eval.seeds),
        noise_sigma=args.sigma if args.sigma is not None
        else cfg.eval.noise_sigma,
        source=args.source)
    protocol.validate()
    out = Path(args.out)
    table = evaluate(cfg, protocol, checkpoint=checkpoint)
    write_manifest(out, "eval", cfg,
                   _overrides(args, ("episodes", "seeds", "sigma", "source",
                                     "checkpoint")))
    write_metrics_csv(table, out / "metrics.csv")
    _write_table(out / "table.json", table)
    return 0


def _write_table(path: Path, table: MetricsTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_ablate(args) -> int:
    cfg = _load(args)
    cfg.validate()
    out = Path(args.out)
    seeds = tuple(args.seeds) if args.seeds else tuple(cfg.eval.seeds)
    cells = tuple(args.cells) if args.cells else None
    table = run_ablation_suite(cfg, seeds=seeds, out_dir=out / "runs",
                               include_geometry=not args.no_geometry,
                               cells=cells)
    write_manifest(out, "ablate", cfg,
                   _overrides(args, ("seeds", "cells", "no_geometry")))
    with open(out / "table.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


CURVE_COLUMNS = ("episode", "reward", "reward_ma10", "duration_s", "holes",
                 "success", "loss", "max_q", "lr", "noise_mag")


def export_curves(run_dir, out_path=None) -> Path:
    """Rebuild the plot-ready per-episode curves from a training log."""
    run_dir = Path(run_dir)
    log = run_dir / "episodes.jsonl"
    if not log.exists():
        raise UserError(f"no episodes.jsonl under {run_dir}")
    records = [json.loads(line) for line in
               log.read_text(encoding="utf-8").splitlines()]
    out_path = Path(out_path) if out_path else run_dir / "curves.csv"
    window = []
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for rec in records:
            window.append(rec["reward"])
            if len(window) > 10:
                window.pop(0)
            row = dict(rec)
            row["reward_ma10"] = sum(window) / len(window)
            row["success"] = int(rec["success"])
            writer.writerow(["" if row[c] is None else row[c]
                             for c in CURVE_COLUMNS])
    return out_path


def cmd_export_curves(args) -> int:
    out = export_curves(args.run_dir, args.out)
    print(out)
    return 0


# --------------------------------------------------------------- dispatch


def _overrides(args, names) -> dict:
    given = {}
    for name in names:
        value = getattr(args, name, None)
        if value not in (None, False):
            given[name] = value if not isinstance(value, Path) else str(value)
    if getattr(args, "config", None):
        given["config"] = args.config
    return given


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltarrs",
        description="Delta + 3-RRS insertion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=out_required,
                       help="output directory")

    p_atlas = sub.add_parser("atlas", help="orientation-workspace atlas")
    common(p_atlas)
    p_atlas.add_argument("--z", type=float, default=0.20,
                         help="platform height of the grid")
    p_atlas.add_argument("--step-deg", type=float, default=1.0,
                         dest="step_deg", help="grid step in degrees")
    p_atlas.set_defaults(func=cmd_atlas)

    p_opt = sub.add_parser("optimize", help="geometric design search")
    common(p_opt)
    p_opt.add_argument("--z", type=float, default=0.20)
    p_opt.add_argument("--step-deg", type=float, default=1.0,
                       dest="step_deg")
    p_opt.set_defaults(func=cmd_optimize)

    p_train = sub.add_parser("train", help="train the agent")
    common(p_train)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--ablate",
                         help="comma-separated component flags to disable")
    p_train.add_argument("--trace", action="store_true",
                         help="write per-step trace.jsonl")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a policy")
    common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--seeds", type=int)
    p_eval.add_argument("--sigma", type=float)
    p_eval.add_argument("--source", default="checkpoint",
                        choices=("checkpoint", "planner", "random"))
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="component/geometry ablations")
    common(p_abl)
    p_abl.add_argument("--seeds", type=int, nargs="+")
    p_abl.add_argument("--cells", nargs="+")
    p_abl.add_argument("--no-geometry", action="store_true",
                       dest="no_geometry")
    p_abl.set_defaults(func=cmd_ablate)

    p_exp = sub.add_parser("export-curves",
                           help="plot-ready CSV from a training log")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--out")
    p_exp.set_defaults(func=cmd_export_curves)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, EvalError, UserError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal fault
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
