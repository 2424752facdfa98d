"""Full uplink Monte Carlo: fading draws, receivers, combining, SINR measurement.

The measured SINR follows the same expectation convention as the closed
forms: the useful power is the squared magnitude of the mean own-symbol
coefficient, and the coefficient's fluctuation counts as interference.
With that split the reported useful / contamination / residual powers sum
exactly to the mean received symbol-estimate power.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericWarning, SingularityError, SpecError
from .estimation import EstimationModel, draw_true_channels, estimate_channels
from .geometry import CovarianceSet
from .lsfp import RAW, SINR_CAP, LsfpSet

ZF_CONDITION_LIMIT = 1e12
DEFAULT_BATCH = 250


@dataclass
class UplinkRealization:
    """One channel use: true/estimated channels, received vectors, symbols."""

    h: np.ndarray          # (L, K, L, M) true channels
    h_hat: np.ndarray      # (L, K, L, M) estimates
    y: np.ndarray          # (L, M) received vectors
    symbols: np.ndarray    # (K, L) unit-power data symbols
    q: np.ndarray          # (K, L) data powers
    noise: np.ndarray      # (L, M)


def draw_uplink_realization(cov: CovarianceSet, model: EstimationModel,
                            data_powers, rng: np.random.Generator) -> UplinkRealization:
    q = np.asarray(data_powers, dtype=float)
    h = draw_true_channels(cov, rng)
    h_hat, _ = estimate_channels(model, h, rng)
    L, M = cov.n_cells, cov.n_antennas
    symbols = np.exp(2j * np.pi * rng.random((cov.users_per_cell, L)))
    noise = (rng.standard_normal((L, M)) + 1j * rng.standard_normal((L, M))) / np.sqrt(2)
    y = np.einsum("mn,lmna,mn->la", np.sqrt(q), h, symbols) + noise
    return UplinkRealization(h=h, h_hat=h_hat, y=y, symbols=symbols, q=q,
                             noise=noise)


def mf_statistics(realization: UplinkRealization) -> np.ndarray:
    """Matched-filter outputs s~[k, l, p] = est(l, k, p)^H y_l."""
    return np.einsum("lkpa,la->klp", np.conj(realization.h_hat), realization.y)


def _zf_receivers(h_hat_l: np.ndarray, cell: int) -> np.ndarray:
    """Zero-forcing receiver columns for one BS, shape (K*L, M)."""
    KL = h_hat_l.shape[0] * h_hat_l.shape[1]
    H = h_hat_l.reshape(KL, -1).T                       # (M, KL), column k*L+p
    G = H.conj().T @ H
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > ZF_CONDITION_LIMIT:
        raise SingularityError(
            f"stacked estimates at cell {cell} are rank deficient "
            f"(condition {cond:.2e}); co-pilot estimates may be colinear")
    return np.linalg.solve(G, H.conj().T)               # rows are v^H


def zf_statistics(realization: UplinkRealization) -> np.ndarray:
    """Zero-forcing outputs s~[k, l, p] = v(l, k, p)^H y_l."""
    L = realization.y.shape[0]
    K = realization.h_hat.shape[1]
    out = np.empty((K, L, L), dtype=complex)
    for l in range(L):
        vh = _zf_receivers(realization.h_hat[l], l)     # (KL, M)
        out[:, l, :] = (vh @ realization.y[l]).reshape(K, L)
    return out


def lsfp_combine(stats: np.ndarray, lsfp: LsfpSet) -> np.ndarray:
    """Central-controller combining: shat[k, l] = sum_jp a*_{kljp} s~[k, j, p]."""
    if lsfp.scaling != RAW:
        raise SpecError("combining uses raw weights; convert with .raw(p)")
    K, L = stats.shape[0], stats.shape[1]
    a4 = lsfp.a.reshape(K, L, L, L)                     # [k, j, p, l]
    return np.einsum("kjpl,kjp->kl", np.conj(a4), stats)


@dataclass
class EmpiricalSinr:
    """Measured per-user SINR and its power decomposition."""

    useful: np.ndarray                # (K, L)
    pilot_contamination: np.ndarray   # (K, L)
    interference_noise: np.ndarray    # (K, L)
    sinr: np.ndarray                  # (K, L)
    rate_bps_hz: np.ndarray           # (K, L)
    ci_halfwidth_db: np.ndarray       # (K, L)
    total_power: np.ndarray           # (K, L) mean |shat|^2 over trials
    n_trials: int
    capped: np.ndarray                # (K, L) bool
    provenance: str = "monte-carlo"

    @property
    def sinr_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.sinr)

    def to_records(self, receiver: str, lsfp_mode: str) -> list[dict]:
        K, L = self.sinr.shape
        rows = []
        for l in range(L):
            for k in range(K):
                rows.append({
                    "cell": l, "user": k, "receiver": receiver,
                    "lsfp_mode": lsfp_mode,
                    "sinr_db": float(self.sinr_db[k, l]),
                    "rate_bps_hz": float(self.rate_bps_hz[k, l]),
                    "ci_halfwidth_db": float(self.ci_halfwidth_db[k, l]),
                })
        return rows

    def save_csv(self, path, receiver: str, lsfp_mode: str) -> None:
        rows = self.to_records(receiver, lsfp_mode)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    def save_json_summary(self, path) -> None:
        doc = {
            "provenance": self.provenance,
            "n_trials": self.n_trials,
            "sinr_db": self.sinr_db.tolist(),
            "rate_bps_hz": self.rate_bps_hz.tolist(),
            "ci_halfwidth_db": self.ci_halfwidth_db.tolist(),
            "capped": self.capped.tolist(),
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _batch_coefficients(cov, model, a4, q, receiver, rng, batch):
    """Symbol coefficients and noise powers for a batch of channel draws.

    Returns (own, copilot, other, noisepow, shat_sq): the own-symbol
    coefficient (complex), summed co-pilot and other-user coefficient
    powers, the exact receiver noise power given the channels, and the
    realized symbol-estimate power.
    """
    L, K, M = cov.n_cells, cov.users_per_cell, cov.n_antennas
    h = draw_true_channels(cov, rng, n=batch)
    h_hat, _ = estimate_channels(model, h, rng)

    if receiver == "mf":
        rvec = h_hat                                     # (B, L, K, L, M)
    elif receiver == "zf":
        rvec = np.empty_like(h_hat)
        flat = h_hat.reshape(batch, L, K * L, M)
        for b in range(batch):
            for l in range(L):
                H = flat[b, l].T                        # (M, KL)
                G = H.conj().T @ H
                cond = np.linalg.cond(G)
                if not np.isfinite(cond) or cond > ZF_CONDITION_LIMIT:
                    raise SingularityError(
                        f"stacked estimates at cell {l} are rank deficient "
                        f"(condition {cond:.2e})")
                V = H @ np.linalg.inv(G)                # (M, KL)
                rvec[b, l] = V.T.reshape(K, L, M)
    else:
        raise SpecError(f"unknown receiver {receiver!r}")

    # inner[b, j, k, p, m, n] = r(j,k,p)^H h(j,m,n)
    inner = np.einsum("bjkpa,bjmna->bjkpmn", np.conj(rvec), h)
    coef = np.einsum("kjpl,bjkpmn->bklmn", np.conj(a4), inner) * np.sqrt(q)
    # receiver noise power: sum_j || sum_p a*_{kljp} r_jkp ||^2
    w = np.einsum("kjpl,bjkpa->bkjla", np.conj(a4), rvec)
    noisepow = np.einsum("bkjla,bkjla->bkl", np.conj(w), w).real

    kk, ll = np.arange(K), np.arange(L)
    own = coef[:, kk[:, None], ll[None, :], kk[:, None], ll[None, :]]
    same_user = coef[:, kk[:, None], ll[None, :], kk[:, None], :]
    copilot = (np.abs(same_user) ** 2).sum(-1) - np.abs(own) ** 2
    other = (np.abs(coef) ** 2).sum((-2, -1)) - (np.abs(same_user) ** 2).sum(-1)

    # realized symbol estimates, for the power-accounting cross-check
    symbols = np.exp(2j * np.pi * rng.random((batch, K, L)))
    znoise = (rng.standard_normal((batch, L, M))
              + 1j * rng.standard_normal((batch, L, M))) / np.sqrt(2)
    shat = np.einsum("bklmn,bmn->bkl", coef, symbols) \
        + np.einsum("bkjla,bja->bkl", np.conj(w), znoise)
    return own, copilot, other, noisepow, np.abs(shat) ** 2


def measure_empirical_sinr(cov: CovarianceSet, model: EstimationModel,
                           lsfp: LsfpSet, pilot_powers, data_powers,
                           receiver: str, n_trials: int, seed: int = 0,
                           batch: int = DEFAULT_BATCH) -> EmpiricalSinr:
    """Estimate per-user SINR by simulating the full uplink n_trials times.

    Trials are split into fixed-size batches; each batch draws its random
    stream from (seed, batch index), so results do not depend on how the
    batches are executed. Confidence half-widths use batch means.
    """
    if n_trials < 1:
        raise SpecError("n_trials must be >= 1")
    q = np.asarray(data_powers, dtype=float)
    lsfp_raw = lsfp if lsfp.scaling == RAW else lsfp.raw(pilot_powers)
    K, L = cov.users_per_cell, cov.n_cells
    a4 = lsfp_raw.a.reshape(K, L, L, L)

    sizes = [batch] * (n_trials // batch)
    if n_trials % batch:
        sizes.append(n_trials % batch)
    if len(sizes) < 2:
        warnings.warn("too few trials for a batch-based confidence interval",
                      NumericWarning, stacklevel=2)

    s_own = np.zeros((K, L), dtype=complex)
    s_own2 = np.zeros((K, L))
    s_cop = np.zeros((K, L))
    s_oth = np.zeros((K, L))
    s_noise = np.zeros((K, L))
    s_total = np.zeros((K, L))
    batch_sinr_db = []

    for b_idx, b_size in enumerate(sizes):
        rng = np.random.default_rng([seed, b_idx])
        own, cop, oth, npow, tot = _batch_coefficients(
            cov, model, a4, q, receiver, rng, b_size)
        s_own += own.sum(0)
        s_own2 += (np.abs(own) ** 2).sum(0)
        s_cop += cop.sum(0)
        s_oth += oth.sum(0)
        s_noise += npow.sum(0)
        s_total += tot.sum(0)
        b_useful = np.abs(own.mean(0)) ** 2
        b_den = cop.mean(0) + oth.mean(0) + npow.mean(0) \
            + (np.abs(own) ** 2).mean(0) - b_useful
        with np.errstate(divide="ignore", invalid="ignore"):
            batch_sinr_db.append(10 * np.log10(
                np.maximum(b_useful, 1e-300) / np.maximum(b_den, 1e-300)))

    n = float(n_trials)
    useful = np.abs(s_own / n) ** 2
    own_var = np.maximum(s_own2 / n - useful, 0.0)
    pc = s_cop / n
    rin = s_oth / n + s_noise / n + own_var
    denom = pc + rin
    capped = denom <= 0
    sinr = np.where(capped, SINR_CAP, useful / np.where(capped, 1.0, denom))
    sinr = np.minimum(sinr, SINR_CAP)
    capped |= sinr >= SINR_CAP

    if len(batch_sinr_db) >= 2:
        spread = np.std(np.stack(batch_sinr_db), axis=0, ddof=1)
        ci = 1.96 * spread / np.sqrt(len(batch_sinr_db))
    else:
        ci = np.full((K, L), np.nan)

    return EmpiricalSinr(
        useful=useful, pilot_contamination=pc, interference_noise=rin,
        sinr=sinr, rate_bps_hz=np.log2(1.0 + sinr), ci_halfwidth_db=ci,
        total_power=s_total / n, n_trials=n_trials, capped=capped)
