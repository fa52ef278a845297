"""Command-line entry points.

Two batch subcommands: ``estimate`` runs one cross-fitted estimate on a CSV
dataset and writes a JSON result; ``simulate`` runs a Monte Carlo scenario
and writes a CSV summary.  Every output file gets a sibling
``<out>.manifest.json`` with the fully resolved configuration, so a run can
be reproduced bit-exactly from the manifest alone (the output files carry no
timestamps).

Exit codes: 0 success, 2 data or argument error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__
from .crossfit import estimate_auto
from .links import link
from .model import Basis, DataError, Dataset, registry_get, registry_names
from .simulate import DgpConfig, report_to_csv, run_monte_carlo
from .solver import FitConfig, LambdaCV, LambdaFixed, LambdaRate, SolverError

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_DATA = 2
EXIT_SOLVER = 3

# reps * n * p guardrail for desk machines; --force overrides
RESOURCE_BOUND = 500_000_000


def _parse_lambda(text: str):
    """`cv`, `rate:<c>`, or a literal nonnegative float."""
    if text == "cv":
        return None  # filled in with the cv-folds option later
    if text.startswith("rate:"):
        return LambdaRate(c=float(text[5:]))
    try:
        return LambdaFixed(value=float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--lambda must be 'cv', 'rate:<c>', or a number, got {text!r}"
        ) from None


def _seed_default() -> int:
    env = os.environ.get("BIFDR_SEED")
    return int(env) if env else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bifdr",
        description="Doubly robust estimation of bilinear influence functionals.",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"bifdr {__version__} (schema {SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="cross-fitted estimate from a CSV dataset")
    est.add_argument("--data", required=True, help="input CSV (fields then z1..zd)")
    est.add_argument("--functional", required=True, choices=sorted(registry_names()))
    est.add_argument("--link-a", default="identity")
    est.add_argument("--link-b", default="identity")
    est.add_argument("--folds", type=int, choices=(2, 3), default=None,
                     help="must match the auto-selected algorithm if given")
    est.add_argument("--lambda", dest="lam", type=_parse_lambda,
                     default=LambdaRate())
    est.add_argument("--cv-folds", type=int, default=10)
    est.add_argument("--delta", type=float, default=None,
                     help="tilt parameter, required for mnar_mean")
    est.add_argument("--tol", type=float, default=1e-7)
    est.add_argument("--max-iter", type=int, default=10000)
    est.add_argument("--seed", type=int, default=None)
    est.add_argument("--out", required=True)

    sim = sub.add_parser("simulate", help="run one Monte Carlo scenario")
    sim.add_argument("--experiment", type=int, required=True, choices=(1, 2, 3, 4, 5))
    sim.add_argument("--alpha-a", type=float, default=3.0)
    sim.add_argument("--alpha-b", type=float, default=3.0)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--p", type=int, default=None)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--paper-scale", action="store_true",
                     help="p=200 and 500 replicates, as in the source study")
    sim.add_argument("--force", action="store_true",
                     help="override the reps*n*p resource guardrail")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", required=True)
    return parser


def _write_manifest(out_path: str, command: str, config: dict, seed: int,
                    wall_time: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "library_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "wall_time_s": wall_time,
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _lambda_descr(lam) -> str:
    if isinstance(lam, LambdaFixed):
        return str(lam.value)
    if isinstance(lam, LambdaRate):
        return f"rate:{lam.c}"
    return f"cv:{lam.k_folds}"


def cmd_estimate(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    lam = args.lam if args.lam is not None else LambdaCV(k_folds=args.cv_folds)
    started = time.monotonic()
    try:
        data = Dataset.from_csv(args.data)
        spec = registry_get(args.functional, delta=args.delta)
        link_a, link_b = link(args.link_a), link(args.link_b)
    except (DataError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    config = FitConfig(lam=lam, tol_kkt=args.tol, max_iter=args.max_iter, seed=seed)
    try:
        est = estimate_auto(spec, data, Basis.identity(data.d), link_a, link_b, config)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.folds is not None and args.folds != est.fold_plan.k:
        print(
            f"error: --folds {args.folds} conflicts with the selected "
            f"algorithm {est.algorithm!r} (uses {est.fold_plan.k} folds)",
            file=sys.stderr,
        )
        return EXIT_DATA
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(est.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        args.out, "estimate",
        {
            "data": args.data, "functional": args.functional,
            "link_a": args.link_a, "link_b": args.link_b,
            "lambda": _lambda_descr(lam), "cv_folds": args.cv_folds,
            "delta": args.delta, "tol": args.tol, "max_iter": args.max_iter,
            "out": args.out,
        },
        seed, time.monotonic() - started,
    )
    print(f"estimate: {args.functional} -> chi_hat={est.chi_hat:.6g} "
          f"({est.algorithm}, n={est.n})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    reps = args.reps if args.reps is not None else (500 if args.paper_scale else 300)
    started = time.monotonic()
    try:
        cfg = DgpConfig(
            experiment=args.experiment, n=args.n, p=args.p,
            alpha_a=args.alpha_a, alpha_b=args.alpha_b,
            seed=seed, paper_scale=args.paper_scale,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    load = reps * cfg.n * cfg.p
    if load > RESOURCE_BOUND and not args.force:
        print(
            f"error: reps*n*p = {load} exceeds the guardrail {RESOURCE_BOUND}; "
            "pass --force to run anyway", file=sys.stderr,
        )
        return EXIT_DATA
    print(f"simulate: experiment {cfg.experiment}, alpha=({cfg.alpha_a},{cfg.alpha_b}), "
          f"n={cfg.n}, p={cfg.p}, reps={reps}, threads={args.threads}")
    try:
        report = run_monte_carlo(cfg, reps, threads=args.threads)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    report_to_csv(report, args.out)
    _write_manifest(
        args.out, "simulate",
        {
            "experiment": cfg.experiment, "alpha_a": cfg.alpha_a,
            "alpha_b": cfg.alpha_b, "n": cfg.n, "p": cfg.p, "reps": reps,
            "threads": args.threads, "paper_scale": args.paper_scale,
            "out": args.out,
        },
        seed, time.monotonic() - started,
    )
    for row in report.rows:
        print(f"  {row['estimator']}: abs_bias={row['abs_bias']:.4g} "
              f"coverage_95={row['coverage_95']:.3f}")
    if not report.valid:
        print(f"warning: {report.failed_reps}/{reps} replicates failed; "
              "report flagged invalid", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad arguments, matching the data-error code
        return int(exc.code or 0)
    if args.command == "estimate":
        return cmd_estimate(args)
    return cmd_simulate(args)


if __name__ == "__main__":
    raise SystemExit(main())
