"""Command line front end.

Subcommands: ``run`` (full experiment from a spec file), ``validate``
(closed form against Monte Carlo on a small instance), ``optimize``
(max-min power control, emits the bisection trace), ``cdf`` (post-process
a records CSV). Exit codes: 0 ok, 2 spec error, 3 numeric error,
4 partial failure (some drops failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import NumericError, SpecError
from .estimation import build_estimation_model
from .experiment import (compute_cdf, load_experiment_spec, make_sinr_evaluator,
                         nearest_rank_quantile, run_experiment)
from .geometry import (NetworkScenario, build_covariance_set, drop_users,
                       load_scenario, scenario_with_seed)
from .detequiv import gamma_all_cells
from .lsfp import LsfpSet, build_summaries, closed_form_report, optimal_lsfp
from .montecarlo import measure_empirical_sinr
from .power import bisection_maxmin

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


def _cmd_run(args) -> int:
    spec = load_experiment_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, scenario=replace(spec.scenario, rng_seed=args.seed))
    if args.drops is not None:
        spec = replace(spec, n_drops=args.drops)
    if args.mc_trials is not None:
        spec = replace(spec, n_mc_trials=args.mc_trials)
    out_dir = args.out or spec.output_dir
    if out_dir is None:
        raise SpecError("no output directory (use --out or spec output_dir)")
    bundle = run_experiment(spec, n_workers=args.workers)
    bundle.write(out_dir)
    print(f"{len(bundle.records)} records -> {out_dir}")
    print(f"5% outage rate: {bundle.rate_q05:.4f} bit/s/Hz, "
          f"5% outage SINR: {bundle.sinr_q05_db:.2f} dB")
    if bundle.failed_drops:
        for drop, err in bundle.failed_drops:
            print(f"drop {drop} failed: {err}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _build_small_pipeline(scenario: NetworkScenario, receiver: str,
                          lsfp_mode: str):
    drop = drop_users(scenario)
    cov = build_covariance_set(scenario, drop)
    K, L = scenario.users_per_cell, scenario.n_cells
    p = np.full((K, L), scenario.q_max)
    q = np.full((K, L), scenario.q_max)
    model = build_estimation_model(cov, p)
    gam = gamma_all_cells(cov, model, q) if receiver == "zf" else None
    summaries = build_summaries(cov, model, q, gamma=gam)
    if lsfp_mode == "optimal":
        lsfp, report = optimal_lsfp(summaries, p, q, receiver)
    else:
        lsfp = LsfpSet.no_lsfp(L, K)
        report = closed_form_report(summaries, lsfp, p, q, receiver)
    return cov, model, summaries, lsfp, report, p, q


def _cmd_validate(args) -> int:
    scenario = NetworkScenario(
        n_cells=args.cells, users_per_cell=args.users, n_antennas=args.antennas,
        rng_seed=args.seed)
    cov, model, summaries, lsfp, report, p, q = _build_small_pipeline(
        scenario, args.receiver, args.lsfp)
    emp = measure_empirical_sinr(cov, model, lsfp, p, q, args.receiver,
                                 args.trials, seed=args.seed)
    closed_db = report.sinr_db
    mc_db = emp.sinr_db
    print("cell user closed_dB   mc_dB     gap_dB")
    worst = 0.0
    for l in range(scenario.n_cells):
        for k in range(scenario.users_per_cell):
            gap = closed_db[k, l] - mc_db[k, l]
            worst = max(worst, abs(gap))
            print(f"{l:4d} {k:4d} {closed_db[k, l]:9.3f} {mc_db[k, l]:9.3f} "
                  f"{gap:9.3f}")
    print(f"max |gap| = {worst:.3f} dB over {args.trials} trials")
    if args.tol_db is not None and worst > args.tol_db:
        print(f"gap exceeds {args.tol_db} dB", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_optimize(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario_with_seed(scenario, args.seed)
    cov, model, summaries, _, _, p, q = _build_small_pipeline(
        scenario, args.receiver, "optimal")
    evaluator = make_sinr_evaluator(summaries, p, args.receiver, "optimal")
    cap = float(np.max(np.linalg.norm(summaries.c, axis=-1) ** 2)) \
        * scenario.q_max * scenario.q_max
    result = bisection_maxmin(evaluator, p, scenario.q_max, eps=args.eps,
                              gamma_max=cap)
    result.save_trace_csv(args.out)
    gamma_db = 10 * np.log10(result.gamma_star) if result.gamma_star > 0 else -np.inf
    print(f"max-min SINR: {result.gamma_star:.6g} ({gamma_db:.2f} dB) "
          f"after {result.iterations} bisection steps -> {args.out}")
    return EXIT_OK


def _cmd_cdf(args) -> int:
    path = Path(args.records)
    if not path.exists():
        raise SpecError(f"no such records file: {path}")
    values = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if args.column not in row:
                raise SpecError(f"column {args.column!r} not in records")
            values.append(float(row[args.column]))
    xs, fracs = compute_cdf(values)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.column, "fraction_leq"])
        for x, y in zip(xs, fracs):
            writer.writerow([repr(float(x)), repr(float(y))])
    q05 = nearest_rank_quantile(values, 0.05)
    print(f"{len(values)} records, 5% quantile of {args.column}: {q05:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsfpsim",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a spec JSON")
    run.add_argument("spec", help="experiment spec JSON path")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--drops", type=int, default=None)
    run.add_argument("--mc-trials", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate",
                         help="closed form vs Monte Carlo on a small instance")
    val.add_argument("--receiver", choices=("mf", "zf"), default="mf")
    val.add_argument("--lsfp", choices=("none", "optimal"), default="none")
    val.add_argument("--cells", type=int, default=2)
    val.add_argument("--users", type=int, default=2)
    val.add_argument("--antennas", type=int, default=32)
    val.add_argument("--trials", type=int, default=2000)
    val.add_argument("--seed", type=int, default=0)
    val.add_argument("--tol-db", type=float, default=None)
    val.set_defaults(func=_cmd_validate)

    opt = sub.add_parser("optimize", help="max-min power control only")
    opt.add_argument("scenario", help="scenario JSON path")
    opt.add_argument("--receiver", choices=("mf", "zf"), default="mf")
    opt.add_argument("--eps", type=float, default=0.01)
    opt.add_argument("--seed", type=int, default=None)
    opt.add_argument("--out", default="power_trace.csv")
    opt.set_defaults(func=_cmd_optimize)

    cdf = sub.add_parser("cdf", help="empirical CDF from a records CSV")
    cdf.add_argument("records")
    cdf.add_argument("--column", default="rate_bps_hz")
    cdf.add_argument("--out", default="cdf.csv")
    cdf.set_defaults(func=_cmd_cdf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
