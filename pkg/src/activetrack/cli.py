"""Command-line front end: ``activetrack {validate,solve,simulate,smooth,evaluate}``.

Exit status is 0 on success, 1 when the inputs are well formed but violate
a model constraint, and 2 on I/O or parse failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .filtering import project_to_simplex, run_filter
from .model import TrackingModel, load_model, validate_model
from .policy import (
    BeliefGrid,
    GreedyPolicy,
    Policy,
    StaticPolicy,
    backward_induction,
    evaluate_policy,
    write_value_csv,
)
from .sim import (
    ControlRule,
    aggregate_metrics,
    read_trajectory_csv,
    run_trials,
    write_metrics_csv,
    write_summary_csv,
    write_trajectory_csv,
)
from .smoother import fixed_interval_smooth, fixed_lag_smooth, fixed_point_path

log = logging.getLogger("activetrack")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class InputError(Exception):
    """Unreadable or ill-formed input file (exit 2)."""


class DomainError(Exception):
    """Well-formed input that violates a model or parameter constraint (exit 1)."""


def _load(path: str) -> TrackingModel:
    try:
        return load_model(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise InputError(f"cannot load model {path}: {exc}") from exc


def _load_valid(path: str) -> TrackingModel:
    model = _load(path)
    problems = validate_model(model.chain, model.obs)
    if problems:
        raise DomainError("invalid model: " + "; ".join(problems))
    return model


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _lags(text: str) -> tuple[int, ...]:
    if text.strip() in ("", "none"):
        return ()
    try:
        lags = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lag list {text!r}") from exc
    if any(v < 1 for v in lags):
        raise argparse.ArgumentTypeError("lags must be positive")
    return lags


def parse_controller(spec: str, model: TrackingModel) -> ControlRule:
    """``greedy``, ``static:ID`` or ``policy:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "greedy":
        return GreedyPolicy(model.obs)
    if kind == "static":
        try:
            u = int(arg)
        except ValueError as exc:
            raise InputError(f"bad static control {arg!r}") from exc
        if not 0 <= u < model.obs.n_controls:
            raise DomainError(f"control id {u} outside 0..{model.obs.n_controls - 1}")
        return StaticPolicy(u)
    if kind == "policy":
        try:
            pol = Policy.load(arg)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"cannot load policy {arg}: {exc}") from exc
        if pol.grid.n != model.n:
            raise DomainError(f"policy is for {pol.grid.n} states, model has {model.n}")
        if pol.table.size and (pol.table.min() < 0 or pol.table.max() >= model.obs.n_controls):
            raise DomainError("policy refers to control ids the model does not have")
        return pol
    raise InputError(f"unknown controller {spec!r} (use greedy, static:ID or policy:PATH)")


def cmd_validate(args: argparse.Namespace) -> int:
    model = _load(args.model)
    problems = validate_model(model.chain, model.obs)
    for p in problems:
        print(p)
    if problems:
        return EXIT_DOMAIN
    print(f"ok: {model.n} states, {model.obs.n_controls} controls, max observation dim {model.obs.max_dim}")
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    model = _load_valid(args.model)
    grid = BeliefGrid(model.n, args.d)
    policy = backward_induction(model.chain, model.obs, grid, args.L, args.M, args.seed)
    out = Path(args.out)
    policy.save(out)
    values = Path(args.values) if args.values else out.with_suffix(".values.csv")
    write_value_csv(values, policy)
    print(f"wrote {out} and {values}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    model = _load_valid(args.model)
    rule = parse_controller(args.controller, model)
    records = run_trials(
        model.chain,
        model.obs,
        rule,
        args.trials,
        args.horizon,
        args.seed,
        lags=args.lags,
        threads=args.threads,
        control_from=args.control_from,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "trajectory.csv", records, model.obs.max_dim)
    metrics = aggregate_metrics(records)
    write_metrics_csv(out / "metrics.csv", metrics)
    write_summary_csv(out / "summary.csv", metrics)
    print(f"wrote trajectory.csv, metrics.csv, summary.csv to {out}")
    return EXIT_OK


def cmd_smooth(args: argparse.Namespace) -> int:
    model = _load_valid(args.model)
    try:
        runs = read_trajectory_csv(args.trajectory)
    except (OSError, KeyError) as exc:
        raise InputError(f"cannot read {args.trajectory}: {exc}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.trial is not None:
        runs = [r for r in runs if r.trial == args.trial]
        if not runs:
            raise DomainError(f"trial {args.trial} not in {args.trajectory}")
    n = model.n
    rows = []
    for run in runs:
        if run.control.size and (run.control.min() < 0 or run.control.max() >= model.obs.n_controls):
            raise DomainError(f"trial {run.trial}: control ids do not fit the model")
        try:
            steps = run_filter(run.observations, run.control, model.chain, model.obs)
        except ValueError as exc:
            raise DomainError(f"trial {run.trial}: {exc}") from exc
        T = len(steps)
        if run.filtered.shape == (T, n):
            gap = float(np.max(np.abs(run.filtered - np.array([s.filtered for s in steps]))))
            if gap > 1e-9:
                raise DomainError(f"trial {run.trial}: recorded beliefs differ from the model's filter by {gap:.3g}")
        if args.mode == "fixed-point":
            k = args.k
            R = T - 1 if args.R is None else args.R
            if not 0 <= k <= R < T:
                raise DomainError(f"need 0 <= k <= R < {T}, got k={k}, R={R}")
            for s, raw in enumerate(fixed_point_path(steps, k, R, model.chain, model.obs), start=k):
                rows.append((run.trial, k, s, raw))
        elif args.mode == "fixed-interval":
            L = T - 1 if args.L is None else args.L
            if not 0 <= L < T:
                raise DomainError(f"need 0 <= L < {T}, got L={L}")
            for k, raw in enumerate(fixed_interval_smooth(steps, L, model.chain, model.obs)):
                rows.append((run.trial, k, L, raw))
        else:
            est = fixed_lag_smooth(steps, args.delta, model.chain, model.obs, gamma=args.gamma)
            for k, raw in enumerate(est):
                rows.append((run.trial, k, k + args.delta, raw))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "k", "R"] + [f"smooth_{i}" for i in range(n)] + [f"raw_{i}" for i in range(n)])
        for trial, k, R, raw in rows:
            proj = project_to_simplex(raw)
            w.writerow([trial, k, R] + [repr(float(v)) for v in proj] + [repr(float(v)) for v in raw])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = _load_valid(args.model)
    rules = [(spec, parse_controller(spec, model)) for spec in args.controller]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", "mean_cost", "se_cost", "accuracy", "se_accuracy"])
        for spec, rule in rules:
            ev = evaluate_policy(rule, model.chain, model.obs, args.trials, args.horizon, args.seed, args.threads)
            w.writerow([spec, repr(ev.mean_cost), repr(ev.cost_stderr), repr(ev.accuracy), repr(ev.accuracy_stderr)])
            print(f"{spec}: cost {ev.mean_cost:.4f} +- {ev.cost_stderr:.4f}, accuracy {ev.accuracy:.4f} +- {ev.accuracy_stderr:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="activetrack", description="Active state tracking for Markov chains.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="compute a finite-horizon sensing policy")
    p.add_argument("model")
    p.add_argument("--d", type=_positive, default=20, help="grid resolution")
    p.add_argument("--L", type=_positive, default=4, help="horizon (stages)")
    p.add_argument("--M", type=_positive, default=256, help="Monte Carlo samples per grid point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="policy JSON path")
    p.add_argument("--values", help="value-surface CSV path (default: next to --out)")
    p.set_defaults(func=cmd_solve)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--trials", type=_positive, default=100)
        p.add_argument("--horizon", type=_positive, default=50)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=_positive, default=1)

    p = sub.add_parser("simulate", help="closed-loop runs with trajectory and metrics CSVs")
    p.add_argument("model")
    p.add_argument("--controller", default="greedy", help="greedy | static:ID | policy:PATH")
    p.add_argument(
        "--control-from", choices=("filter", "oracle"), default="filter",
        help="belief that drives the controller",
    )
    p.add_argument("--lags", type=_lags, default=(1, 2, 3, 4), help="smoothing lags, e.g. 1,2,3,4 or none")
    run_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("smooth", help="re-estimate a recorded trajectory")
    p.add_argument("trajectory")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("fixed-point", "fixed-interval", "fixed-lag"), default="fixed-point")
    p.add_argument("--k", type=int, default=0, help="anchor (fixed-point)")
    p.add_argument("--R", type=int, help="last stage (fixed-point; default: end of run)")
    p.add_argument("--L", type=int, help="interval end (fixed-interval; default: end of run)")
    p.add_argument("--delta", type=_positive, default=1, help="lag (fixed-lag)")
    p.add_argument("--gamma", choices=("derived", "short"), default="derived", help="fixed-lag correction form")
    p.add_argument("--trial", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("evaluate", help="compare controllers on common random numbers")
    p.add_argument("model")
    p.add_argument("--controller", action="append", required=True, help="repeatable: greedy | static:ID | policy:PATH")
    run_flags(p)
    p.add_argument("--out", required=True, help="summary CSV path")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
