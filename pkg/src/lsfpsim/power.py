"""Max-min transmit power optimization on the slow-fading closed forms.

The feasibility oracle is the distributed iteration
``q <- min(Q_max, q * gamma / SINR(q))``: it always terminates, and when
the target is feasible it lands on the minimal-total-power allocation that
meets it. Bisection over the target then solves the max-min program.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PowerControlAnomalyError, SpecError

FEASIBILITY_SLACK = 1e-3
DEFAULT_EPS = 0.01
MAX_INNER_ITER = 10_000


@dataclass
class PowerAllocation:
    """Pilot and data powers, linear mW, capped elementwise by q_max."""

    q: np.ndarray           # (K, L)
    p: np.ndarray           # (K, L)
    q_max: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        for name, arr in (("q", self.q), ("p", self.p)):
            if np.any(arr < 0) or np.any(arr > self.q_max * (1 + 1e-12)):
                raise SpecError(f"{name} must lie in [0, q_max]")

    @classmethod
    def full_power(cls, K: int, L: int, q_max: float) -> "PowerAllocation":
        full = np.full((K, L), q_max)
        return cls(q=full.copy(), p=full.copy(), q_max=q_max)


@dataclass
class DistributedResult:
    q: np.ndarray
    sinr: np.ndarray
    converged_to_target: bool
    iterations: int
    trace: list[np.ndarray] = field(default_factory=list)


def distributed_power_iteration(sinr_eval: Callable[[np.ndarray], np.ndarray],
                                gamma_target: float, q0: np.ndarray,
                                q_max: float, eps: float = 1e-8,
                                max_iter: int = MAX_INNER_ITER,
                                record_trace: bool = False) -> DistributedResult:
    """Synchronous normalized power update toward a common SINR target.

    Stops when the relative step falls below ``eps``. ``converged_to_target``
    reports whether every user ends within one part in a thousand of the
    target. Exhausting ``max_iter`` raises: the update is a standard
    interference-function iteration that provably terminates, so a timeout
    points at a broken SINR evaluator.
    """
    if gamma_target < 0:
        raise SpecError("gamma_target must be nonnegative")
    q = np.asarray(q0, dtype=float).copy()
    trace = [q.copy()] if record_trace else []
    sinr = np.asarray(sinr_eval(q), dtype=float)
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = np.where(q > 0, q * gamma_target / sinr, 0.0)
        q_new = np.minimum(q_max, np.nan_to_num(scaled, nan=0.0, posinf=q_max))
        step = np.linalg.norm(q_new - q)
        q = q_new
        if record_trace:
            trace.append(q.copy())
        sinr = np.asarray(sinr_eval(q), dtype=float)
        if step <= eps * np.linalg.norm(q) + 1e-300:
            met = bool(np.all(sinr >= gamma_target * (1.0 - FEASIBILITY_SLACK)))
            return DistributedResult(q=q, sinr=sinr, converged_to_target=met,
                                     iterations=it, trace=trace)
    raise PowerControlAnomalyError(
        f"distributed power iteration did not settle within {max_iter} steps; "
        "this contradicts its convergence guarantee and suggests a defective "
        "SINR evaluator")


@dataclass
class PowerOptResult:
    gamma_star: float
    q_star: np.ndarray
    iterations: int
    trace: list[tuple[int, float, bool, float]]
    distributed_trace: list[np.ndarray]

    def save_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "gamma", "feasible", "total_power"])
            writer.writerows(self.trace)


def bisection_maxmin(sinr_eval: Callable[[np.ndarray], np.ndarray],
                     pilot_powers, q_max: float, eps: float = DEFAULT_EPS,
                     gamma_max: float | None = None,
                     inner_eps: float = 1e-8) -> PowerOptResult:
    """Max-min SINR by bisecting the target and probing feasibility.

    A feasible midpoint raises the lower bracket, an infeasible one lowers
    the upper bracket, until the bracket is narrower than ``eps`` (linear
    SINR units). Returns the last feasible target and its powers.
    """
    if eps <= 0:
        raise SpecError("eps must be positive")
    p = np.asarray(pilot_powers, dtype=float)
    q_full = np.full_like(p, q_max)
    if gamma_max is None:
        gamma_max = 1e3 * float(np.max(sinr_eval(q_full)))
    gamma_min = 0.0
    best_q = q_full.copy()
    best_inner: list[np.ndarray] = []

    # the cap must be infeasible for the bracket invariant to hold
    for _ in range(60):
        probe = distributed_power_iteration(sinr_eval, gamma_max, q_full.copy(),
                                            q_max, eps=inner_eps)
        if not probe.converged_to_target:
            break
        gamma_min = gamma_max
        best_q = probe.q
        gamma_max *= 2.0

    trace: list[tuple[int, float, bool, float]] = []
    it = 0
    while gamma_max - gamma_min >= eps:
        it += 1
        gamma = 0.5 * (gamma_max + gamma_min)
        result = distributed_power_iteration(sinr_eval, gamma, q_full.copy(),
                                             q_max, eps=inner_eps,
                                             record_trace=True)
        trace.append((it, gamma, result.converged_to_target,
                      float(result.q.sum())))
        if result.converged_to_target:
            gamma_min = gamma
            best_q = result.q
            best_inner = result.trace
        else:
            gamma_max = gamma
    return PowerOptResult(gamma_star=gamma_min, q_star=best_q, iterations=it,
                          trace=trace, distributed_trace=best_inner)


def outage_curve(sinr_eval: Callable[[np.ndarray], np.ndarray],
                 gamma_grid, q0: np.ndarray, q_max: float,
                 power_control: bool = True,
                 inner_eps: float = 1e-8) -> np.ndarray:
    """Fraction of users reaching each SINR target.

    With power control the distributed iteration chases each target
    starting from ``q0``; without it the SINR profile at ``q0`` is simply
    thresholded.
    """
    gammas = np.asarray(gamma_grid, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    fractions = np.empty_like(gammas)
    if not power_control:
        sinr = np.asarray(sinr_eval(q0))
        for i, g in enumerate(gammas):
            fractions[i] = float(np.mean(sinr >= g))
        return fractions
    for i, g in enumerate(gammas):
        result = distributed_power_iteration(sinr_eval, float(g), q0.copy(),
                                             q_max, eps=inner_eps)
        fractions[i] = float(np.mean(
            result.sinr >= g * (1.0 - FEASIBILITY_SLACK)))
    return fractions
