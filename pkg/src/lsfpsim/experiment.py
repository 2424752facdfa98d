"""Experiment orchestration: drops, pipeline wiring, aggregation, emission."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detequiv import GammaRecomputer, gamma_all_cells
from .errors import LsfpsimError, SpecError
from .estimation import build_estimation_model
from .geometry import (NetworkScenario, build_covariance_set, drop_users,
                       scenario_with_seed)
from .lsfp import LsfpSet, closed_form_report, optimal_lsfp, build_summaries
from .montecarlo import measure_empirical_sinr
from .power import bisection_maxmin, distributed_power_iteration

RECEIVERS = ("mf", "zf")
LSFP_MODES = ("none", "optimal")
POWER_MODES = ("fixed_qmax", "maxmin_bisect", "distributed_to_target")

RECORD_FIELDS = ["drop", "cell", "user", "receiver", "lsfp_mode", "power_mode",
                 "sinr_db", "rate_bps_hz", "gamma_star", "sinr_mc_db",
                 "mc_ci_halfwidth_db"]

EXPERIMENT_SCHEMA = 1


@dataclass
class ExperimentSpec:
    """One experiment configuration: scenario plus pipeline switches."""

    scenario: NetworkScenario
    receiver: str = "mf"
    lsfp_mode: str = "optimal"
    power_mode: str = "fixed_qmax"
    power_target_db: float | None = None
    n_drops: int = 50
    n_mc_trials: int = 0
    output_dir: str | None = None
    bisect_eps: float = 0.01
    freeze_gamma: bool = False

    def __post_init__(self):
        if self.receiver not in RECEIVERS:
            raise SpecError(f"receiver must be one of {RECEIVERS}")
        if self.lsfp_mode not in LSFP_MODES:
            raise SpecError(f"lsfp_mode must be one of {LSFP_MODES}")
        if self.power_mode not in POWER_MODES:
            raise SpecError(f"power_mode must be one of {POWER_MODES}")
        if self.power_mode == "distributed_to_target" and self.power_target_db is None:
            raise SpecError("distributed_to_target needs power_target_db")
        if self.n_drops < 1:
            raise SpecError("n_drops must be >= 1")
        if self.n_mc_trials < 0:
            raise SpecError("n_mc_trials must be >= 0")
        if self.receiver == "zf":
            scn = self.scenario
            if scn.n_antennas < scn.users_per_cell * scn.n_cells:
                raise SpecError("zero forcing needs at least K*L antennas")

    def to_json_dict(self) -> dict:
        return {
            "schema": EXPERIMENT_SCHEMA,
            "scenario": self.scenario.to_json_dict(),
            "receiver": self.receiver,
            "lsfp_mode": self.lsfp_mode,
            "power_mode": self.power_mode,
            "power_target_db": self.power_target_db,
            "n_drops": self.n_drops,
            "n_mc_trials": self.n_mc_trials,
            "output_dir": self.output_dir,
            "bisect_eps": self.bisect_eps,
            "freeze_gamma": self.freeze_gamma,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise SpecError("experiment document must be a JSON object")
        if doc.get("schema") != EXPERIMENT_SCHEMA:
            raise SpecError(f"unsupported experiment schema {doc.get('schema')!r}")
        scenario = NetworkScenario.from_json_dict(doc["scenario"])
        kwargs = {k: v for k, v in doc.items() if k not in ("schema", "scenario")}
        try:
            return cls(scenario=scenario, **kwargs)
        except TypeError as exc:
            raise SpecError(f"bad experiment field: {exc}") from exc


def load_experiment_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read experiment spec: {exc}") from exc
    return ExperimentSpec.from_json_dict(doc)


def compute_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF evaluated at every distinct value (right continuous)."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise SpecError("cannot build a CDF from no records")
    xs = np.unique(vals)
    fracs = np.searchsorted(np.sort(vals), xs, side="right") / vals.size
    return xs, fracs


def nearest_rank_quantile(values, frac: float) -> float:
    """Nearest-rank quantile: the ceil(frac * n)-th smallest value."""
    vals = np.sort(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise SpecError("cannot take a quantile of no records")
    rank = max(1, int(np.ceil(frac * vals.size)))
    return float(vals[rank - 1])


@dataclass
class ResultBundle:
    """Aggregated per-user records plus summary statistics for one config."""

    records: list[dict]
    cdf_rate: tuple[np.ndarray, np.ndarray]
    rate_q05: float
    sinr_q05_db: float
    failed_drops: list[tuple[int, str]]
    metadata: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
            writer.writeheader()
            writer.writerows(self.records)
        with open(out / "cdf.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rate_bps_hz", "fraction_leq"])
            for x, y in zip(*self.cdf_rate):
                writer.writerow([repr(float(x)), repr(float(y))])
        manifest = dict(self.metadata)
        manifest.update({
            "rate_q05": self.rate_q05,
            "sinr_q05_db": self.sinr_q05_db,
            "n_records": len(self.records),
            "failed_drops": self.failed_drops,
        })
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def make_sinr_evaluator(summaries, pilot_powers, receiver: str, lsfp_mode: str,
                        gamma_recomputer: GammaRecomputer | None = None,
                        freeze_gamma: bool = False):
    """Closure q -> per-user SINR array, rebuilding q-dependent state.

    The interference kernels are refreshed for every call; for zero forcing
    the residual kernels are as well, unless ``freeze_gamma`` keeps the ones
    from the summaries (cheaper, slightly optimistic when powers shrink).
    """
    L, K = summaries.n_cells, summaries.users_per_cell
    identity = LsfpSet.no_lsfp(L, K)

    def evaluate(q: np.ndarray) -> np.ndarray:
        s = summaries.with_data_powers(q)
        if receiver == "zf" and gamma_recomputer is not None and not freeze_gamma:
            s = s.with_gamma(gamma_recomputer.gammas(q))
        if lsfp_mode == "optimal":
            _, report = optimal_lsfp(s, pilot_powers, q, receiver)
        else:
            report = closed_form_report(s, identity, pilot_powers, q, receiver)
        return report.sinr

    return evaluate


def run_drop(spec: ExperimentSpec, drop_index: int, seed: int) -> dict:
    """Run the full pipeline for one user drop; never raises package errors."""
    try:
        scn = scenario_with_seed(spec.scenario, seed)
        drop = drop_users(scn)
        cov = build_covariance_set(scn, drop)
        K, L = scn.users_per_cell, scn.n_cells
        p = np.full((K, L), scn.q_max)
        model = build_estimation_model(cov, p)
        q = np.full((K, L), scn.q_max)

        products_by_cell = None
        gamma0 = None
        recomputer = None
        if spec.receiver == "zf":
            products_by_cell = [
                np.stack([model.pair_products(j, k) for k in range(K)])
                for j in range(L)
            ]
            if spec.power_mode == "fixed_qmax" or spec.freeze_gamma:
                gamma0 = gamma_all_cells(cov, model, q,
                                         products_by_cell=products_by_cell)
            else:
                recomputer = GammaRecomputer(cov, model, q,
                                             products_by_cell=products_by_cell)
                gamma0 = recomputer.gammas(q)

        summaries = build_summaries(cov, model, q, gamma=gamma0,
                                    products=products_by_cell)
        evaluator = make_sinr_evaluator(summaries, p, spec.receiver,
                                        spec.lsfp_mode, recomputer,
                                        spec.freeze_gamma)

        gamma_star = float("nan")
        if spec.power_mode == "maxmin_bisect":
            cap = float(np.max(np.linalg.norm(summaries.c, axis=-1) ** 2)) \
                * scn.q_max * scn.q_max
            opt = bisection_maxmin(evaluator, p, scn.q_max, eps=spec.bisect_eps,
                                   gamma_max=cap)
            q = opt.q_star
            gamma_star = opt.gamma_star
        elif spec.power_mode == "distributed_to_target":
            target = 10.0 ** (spec.power_target_db / 10.0)
            res = distributed_power_iteration(evaluator, target, q.copy(),
                                              scn.q_max)
            q = res.q

        summaries = summaries.with_data_powers(q)
        if spec.receiver == "zf" and recomputer is not None:
            summaries = summaries.with_gamma(recomputer.gammas(q))
        if spec.lsfp_mode == "optimal":
            lsfp, report = optimal_lsfp(summaries, p, q, spec.receiver)
        else:
            lsfp = LsfpSet.no_lsfp(L, K)
            report = closed_form_report(summaries, lsfp, p, q, spec.receiver)

        mc_db = np.full((K, L), np.nan)
        mc_ci = np.full((K, L), np.nan)
        if spec.n_mc_trials > 0:
            emp = measure_empirical_sinr(cov, model, lsfp, p, q, spec.receiver,
                                         spec.n_mc_trials, seed=seed)
            mc_db = emp.sinr_db
            mc_ci = emp.ci_halfwidth_db

        records = []
        sinr_db = report.sinr_db
        rates = report.rate_bps_hz
        for l in range(L):
            for k in range(K):
                records.append({
                    "drop": drop_index, "cell": l, "user": k,
                    "receiver": spec.receiver, "lsfp_mode": spec.lsfp_mode,
                    "power_mode": spec.power_mode,
                    "sinr_db": float(sinr_db[k, l]),
                    "rate_bps_hz": float(rates[k, l]),
                    "gamma_star": gamma_star,
                    "sinr_mc_db": float(mc_db[k, l]),
                    "mc_ci_halfwidth_db": float(mc_ci[k, l]),
                })
        return {"drop": drop_index, "ok": True, "records": records}
    except LsfpsimError as exc:
        return {"drop": drop_index, "ok": False,
                "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(spec: ExperimentSpec, n_workers: int = 1) -> ResultBundle:
    """Replicate the pipeline over independent drops and aggregate.

    Drop seeds derive deterministically from the scenario seed, and results
    are assembled in drop order, so the bundle does not depend on the
    worker count. Failed drops are reported, not fatal.
    """
    t0 = time.time()
    seeds = [int(ss.generate_state(1, np.uint64)[0])
             for ss in np.random.SeedSequence(spec.scenario.rng_seed).spawn(spec.n_drops)]
    args = [(spec, i, seeds[i]) for i in range(spec.n_drops)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_run_drop_star, args))
    else:
        outcomes = [run_drop(*a) for a in args]
    outcomes.sort(key=lambda o: o["drop"])

    records: list[dict] = []
    failed: list[tuple[int, str]] = []
    for out in outcomes:
        if out["ok"]:
            records.extend(out["records"])
        else:
            failed.append((out["drop"], out["error"]))
    if not records:
        raise SpecError("every drop failed; nothing to aggregate")

    rates = [r["rate_bps_hz"] for r in records]
    sinrs = [r["sinr_db"] for r in records]
    bundle = ResultBundle(
        records=records,
        cdf_rate=compute_cdf(rates),
        rate_q05=nearest_rank_quantile(rates, 0.05),
        sinr_q05_db=nearest_rank_quantile(sinrs, 0.05),
        failed_drops=failed,
        metadata={
            "version": __version__,
            "seed": spec.scenario.rng_seed,
            "receiver": spec.receiver,
            "lsfp_mode": spec.lsfp_mode,
            "power_mode": spec.power_mode,
            "n_drops": spec.n_drops,
            "n_mc_trials": spec.n_mc_trials,
            "wall_time_s": round(time.time() - t0, 3),
        })
    return bundle


def _run_drop_star(args):
    return run_drop(*args)
