"""Command-line front end.

Exit codes: 0 on success (and all checks passing), 1 when a verification
command ran fine but a check failed, 2 on configuration errors, 3 when a
runtime invariant was violated.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .errors import ConfigError, InvariantError
from .relaxations import SCHEME_NAMES, plan_from_file

MODES = ("single_step", "parallel_step")


def _alpha_value(text: str):
    try:
        return float(text)
    except ValueError:
        return text  # a rate tag such as T2; validated downstream


def _add_objective_args(sp: argparse.ArgumentParser) -> None:
    g = sp.add_argument_group("objective")
    g.add_argument(
        "--objective",
        default="quadratic",
        choices=("quadratic", "logistic", "cosine_quadratic"),
    )
    g.add_argument("--d", type=int, default=10, help="dimension")
    g.add_argument("--m", type=int, default=64, help="number of samples")
    g.add_argument("--c", type=float, default=0.5, help="smallest Hessian eigenvalue")
    g.add_argument("--L", type=float, default=2.0, help="largest Hessian eigenvalue")
    g.add_argument("--spread", type=float, default=1.0, help="target scatter")
    g.add_argument("--center", type=float, default=0.0, help="target center magnitude")
    g.add_argument("--obj-seed", type=int, default=0, help="objective construction seed")
    g.add_argument("--l2", type=float, default=0.0, help="logistic ridge weight")
    g.add_argument("--scale", type=float, default=1.0, help="logistic feature scale")
    g.add_argument("--amp", type=float, default=0.5, help="cosine bump amplitude")
    g.add_argument("--omega", type=float, default=3.0, help="cosine bump frequency")
    g.add_argument("--region-radius", type=float, default=None, help="constant probe radius")


def _objective_spec(args: argparse.Namespace) -> dict:
    kind = args.objective
    if kind == "quadratic":
        return {
            "kind": kind,
            "d": args.d,
            "m": args.m,
            "c": args.c,
            "L": args.L,
            "spread": args.spread,
            "center": args.center,
            "seed": args.obj_seed,
        }
    if kind == "logistic":
        return {
            "kind": kind,
            "d": args.d,
            "m": args.m,
            "seed": args.obj_seed,
            "l2": args.l2,
            "scale": args.scale,
        }
    return {
        "kind": kind,
        "d": args.d,
        "m": args.m,
        "c": args.c,
        "L": args.L,
        "spread": args.spread,
        "center": args.center,
        "seed": args.obj_seed,
        "amp": args.amp,
        "omega": args.omega,
    }


def _add_scheme_args(sp: argparse.ArgumentParser) -> None:
    g = sp.add_argument_group("scheme")
    g.add_argument("--scheme", default="exact", choices=SCHEME_NAMES)
    g.add_argument("--f", type=int, default=0, help="fault budget")
    g.add_argument("--tau-max", type=int, default=0, help="staleness/delay bound")
    g.add_argument("--compressor", default="identity", help="identity, onebit, or topk:K")
    g.add_argument("--beta", type=float, default=0.0, help="norm threshold")
    g.add_argument("--require-full", action="store_true", help="wait for every message")
    g.add_argument("--b-adv", type=float, default=0.0, help="adversarial gap level")
    g.add_argument("--late-prob", type=float, default=0.0)
    g.add_argument("--omit-prob", type=float, default=0.0)
    g.add_argument("--release-prob", type=float, default=1.0)
    g.add_argument("--drop-prob", type=float, default=0.0)
    g.add_argument("--plan", default=None, help="JSON schedule file of planned events")


def _scheme_spec(args: argparse.Namespace) -> dict:
    spec = {
        "scheme": args.scheme,
        "f": args.f,
        "tau_max": args.tau_max,
        "compressor": args.compressor,
        "beta": args.beta,
        "require_full": args.require_full,
        "b_adv": args.b_adv,
        "late_prob": args.late_prob,
        "omit_prob": args.omit_prob,
        "release_prob": args.release_prob,
        "drop_prob": args.drop_prob,
    }
    if args.plan:
        spec["plan"] = [dict(ev) for ev in plan_from_file(args.plan)]
    return spec


def _add_run_args(sp: argparse.ArgumentParser) -> None:
    g = sp.add_argument_group("run")
    g.add_argument("--p", type=int, default=4, help="number of workers")
    g.add_argument("--T", type=int, default=1000, help="iteration horizon")
    g.add_argument("--alpha", type=_alpha_value, default=0.05, help="step size or rate tag T1..T4")
    g.add_argument("--mode", default=None, choices=MODES)
    g.add_argument("--trials", type=int, default=1)
    g.add_argument("--seed-data", type=int, default=0)
    g.add_argument("--seed-sched", type=int, default=0)
    g.add_argument("--events", action="store_true", help="keep schedule and sample logs")
    g.add_argument("--config", default=None, help="experiment JSON file (overrides flags)")


def _experiment(args: argparse.Namespace) -> harness.ExperimentConfig:
    if args.config:
        return harness.ExperimentConfig.load(args.config)
    return harness.ExperimentConfig(
        objective=_objective_spec(args),
        scheme=_scheme_spec(args),
        p=args.p,
        T=args.T,
        alpha=args.alpha,
        mode=args.mode,
        trials=args.trials,
        seed_data=args.seed_data,
        seed_sched=args.seed_sched,
        region_radius=args.region_radius,
        keep_event_logs=args.events,
    )


def cmd_run(args: argparse.Namespace) -> int:
    result = harness.run_experiment(_experiment(args))
    if args.out:
        harness.write_run_csv(args.out, result)
    if args.summary:
        harness.write_summary_json(args.summary, result)
    print(json.dumps(harness.experiment_summary(result), sort_keys=True, indent=2))
    return 0


def cmd_verify_bounds(args: argparse.Namespace) -> int:
    result = harness.run_experiment(_experiment(args))
    check = harness.check_bound(result)
    print(check.line())
    return 0 if check.passed is not False else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    with open(args.config) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad sweep file {args.config}: {exc}") from exc
    if not isinstance(spec, dict) or "cells" not in spec:
        raise ConfigError("a sweep file needs a base config plus a cells list")
    cells = spec.pop("cells")
    checks = harness.sweep(spec, cells)
    for ch in checks:
        print(ch.line())
    if args.out:
        harness.write_table_csv(args.out, checks)
    return 0 if all(ch.passed is not False for ch in checks) else 1


def cmd_lower_bound(args: argparse.Namespace) -> int:
    grid = tuple(float(x) for x in args.b_grid.split(","))
    cells = harness.lower_bound_study(
        b_grid=grid, eps=args.eps, cap=args.cap, k_max=args.k_max
    )
    for c in cells:
        print(
            f"B={c.b_adv:g}: alpha=2^-{c.exponent}={c.alpha:g}, "
            f"{c.iterations} iterations to eps"
        )
    if args.out:
        harness.write_lower_bound_csv(args.out, cells)
    return 0


def cmd_dump_objective(args: argparse.Namespace) -> int:
    info = harness.describe_objective(_objective_spec(args), args.region_radius)
    print(json.dumps(info, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastisim",
        description="Deterministic simulator for distributed SGD under relaxed consistency",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="run one experiment and print its summary")
    _add_objective_args(sp)
    _add_scheme_args(sp)
    _add_run_args(sp)
    sp.add_argument("--out", default=None, help="per-iteration CSV path")
    sp.add_argument("--summary", default=None, help="summary JSON path")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("verify-bounds", help="check the empirical B against its closed form")
    _add_objective_args(sp)
    _add_scheme_args(sp)
    _add_run_args(sp)
    sp.set_defaults(func=cmd_verify_bounds)

    sp = sub.add_parser("sweep", help="bound checks over a table of scheme cells")
    sp.add_argument("--config", required=True, help="JSON file: base config plus cells")
    sp.add_argument("--out", default=None, help="table CSV path")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("lower-bound", help="largest feasible step size per gap level")
    sp.add_argument("--b-grid", default="0,1,2,4,8")
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--cap", type=int, default=60000)
    sp.add_argument("--k-max", type=int, default=12)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_lower_bound)

    sp = sub.add_parser("dump-objective", help="print an objective's measured constants")
    _add_objective_args(sp)
    sp.set_defaults(func=cmd_dump_objective)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
