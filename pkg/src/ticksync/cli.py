"""Command-line interface.

Subcommands:
  simulate  write raw measurement streams
  bounds    clock resolution bounds at the configured checkpoints
  map       spatial bound map over a lattice
  run       one online estimation run (trajectory)
  mc        Monte-Carlo RMSE versus bounds

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .bounds import bound_map, grid_points
from .experiments import (
    ConfigError,
    Table,
    compute_bound_curve,
    emit_results,
    map_table,
    parse_config,
    run_monte_carlo,
    trial_campaign,
)
from .model import EpochMode


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to the JSON config")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default="-", help="output path, '-' for stdout")
    sub.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticksync",
        description="Passive clock synchronization: simulate, bound, estimate.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("simulate", "generate measurement streams"),
        ("bounds", "clock bounds at the configured checkpoints"),
        ("map", "spatial bound map"),
        ("run", "single online estimation run"),
        ("mc", "Monte-Carlo RMSE versus bounds"),
    ):
        sub = subs.add_parser(name, help=desc)
        _common_flags(sub)
        if name in ("simulate", "mc"):
            sub.add_argument("--trials", type=int, default=None)
        if name == "mc":
            sub.add_argument("--jobs", type=int, default=None)
    return parser


def _load_config(args):
    config = parse_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "trials", None) is not None:
        config = replace(config, trials=args.trials)
    if getattr(args, "jobs", None) is not None:
        config = replace(config, jobs=args.jobs)
    return config


def _cmd_simulate(args) -> None:
    config = _load_config(args)
    columns = ("trial", "k", "mode", "y_phi", "y_u", "y_m", "y_1", "y_2", "y_3")
    rows = []
    for trial in range(config.trials):
        for meas in trial_campaign(config, trial):
            row = {"trial": trial, "k": meas.k, "mode": meas.mode.value,
                   "y_phi": meas.y[0], "y_u": meas.y[1], "y_m": meas.y[2],
                   "y_1": None, "y_2": None, "y_3": None}
            if meas.mode is EpochMode.WITH_TRANSCEIVERS:
                row["y_1"], row["y_2"], row["y_3"] = meas.y[3:]
            rows.append(row)
    emit_results(Table(columns, rows), args.format, args.out)


def _cmd_bounds(args) -> None:
    config = _load_config(args)
    curve = compute_bound_curve(config)
    columns = ("k", "bound_phi_ns", "bound_Tu_ns", "bound_Tm_ns")
    rows = [
        {"k": k, "bound_phi_ns": v[0], "bound_Tu_ns": v[1], "bound_Tm_ns": v[2]}
        for k, v in sorted(curve.items())
    ]
    emit_results(Table(columns, rows), args.format, args.out)


def _cmd_map(args) -> None:
    config = _load_config(args)
    spec = config.map_spec
    if spec is None:
        raise ConfigError("map subcommand needs a [map] section in the config")
    points = grid_points(spec.x1, spec.x2)
    precision = None
    if spec.kind == "hcrb":
        stds = np.asarray(spec.prior_stds, dtype=float)
        precision = np.diag(1.0 / stds**2)
    result = bound_map(
        points, spec.kind, config.scene, config.noise.sigma_nominal,
        config.epochs, prior_precision=precision, n_samples=spec.n_samples,
        seed=config.seed, alpha=config.noise.alpha,
    )
    emit_results(map_table(result), args.format, args.out)


def _cmd_run(args) -> None:
    config = _load_config(args)
    from .estimator import run_online

    stream = trial_campaign(config, 0)
    records = run_online(
        stream, config.scene, config.prior, config.solver, config.noise.alpha
    )
    dim = config.scene.dim
    columns = (
        ["trial", "k", "phi_hat", "Tu_hat", "Tm_hat"]
        + [f"x_hat_{i + 1}" for i in range(dim)]
        + ["sigma_hat", "provisional"]
    )
    rows = []
    for rec in records:
        row = {"trial": 0, "k": rec.k, "phi_hat": rec.theta_hat[0],
               "Tu_hat": rec.theta_hat[1], "Tm_hat": rec.theta_hat[2],
               "sigma_hat": rec.sigma_hat, "provisional": int(rec.provisional)}
        for i in range(dim):
            row[f"x_hat_{i + 1}"] = rec.theta_hat[3 + i]
        rows.append(row)
    emit_results(Table(tuple(columns), rows), args.format, args.out)


def _cmd_mc(args) -> None:
    config = _load_config(args)
    table = run_monte_carlo(config)
    emit_results(table, args.format, args.out)


_COMMANDS = {
    "simulate": _cmd_simulate,
    "bounds": _cmd_bounds,
    "map": _cmd_map,
    "run": _cmd_run,
    "mc": _cmd_mc,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
