"""Pilot-phase linear MMSE channel estimation statistics and realizations.

The de-spread pilot observation at BS l for user index k is
``t_{kl} = sum_n sqrt(p_{kn}) h_{lkn} + noise`` with unit-variance noise,
so every co-pilot estimate is a deterministic linear map of the same
observation. The pilot codebook itself is never materialized: it is an
isometry and simulating it would add cost without changing any statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, SpecError
from .geometry import CovarianceSet

CONDITION_LIMIT = 1e12


@dataclass
class EstimationModel:
    """Second-order statistics of the MMSE channel estimates.

    ``K[l, k] = I + sum_n R[l, k, n] p[k, n]`` is the observation covariance
    and ``W[l, k, m] = K[l, k]^-1 R[l, k, m]`` its solve against each source
    covariance; every downstream trace and estimate is built from ``W``
    rather than an explicit inverse.
    """

    cov: CovarianceSet
    pilot_powers: np.ndarray          # (K, L)
    K: np.ndarray = field(init=False)  # (L, K, M, M)
    W: np.ndarray = field(init=False)  # (L, K, L, M, M)

    def __post_init__(self):
        p = np.asarray(self.pilot_powers, dtype=float)
        L, K_users = self.cov.n_cells, self.cov.users_per_cell
        M = self.cov.n_antennas
        if p.shape != (K_users, L):
            raise SpecError(f"pilot powers must have shape {(K_users, L)}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise SpecError("pilot powers must be finite and nonnegative")
        self.pilot_powers = p
        self.K = np.eye(M) + np.einsum("kn,lknab->lkab", p, self.cov.R)
        eigs = np.linalg.eigvalsh(self.K)
        if np.any(eigs[..., -1] / eigs[..., 0] > CONDITION_LIMIT):
            raise NumericError("pilot observation covariance is ill-conditioned")
        self.W = np.linalg.solve(self.K[:, :, None, :, :], self.cov.R)

    @property
    def n_cells(self) -> int:
        return self.cov.n_cells

    @property
    def users_per_cell(self) -> int:
        return self.cov.users_per_cell

    @property
    def n_antennas(self) -> int:
        return self.cov.n_antennas

    def k_matrix(self, l: int, k: int) -> np.ndarray:
        return self.K[l, k]

    def phi_est(self, l: int, k: int, m: int) -> np.ndarray:
        """Covariance of the estimate of the channel from user (k, m) at BS l."""
        return self.pilot_powers[k, m] * (self.cov.R[l, k, m] @ self.W[l, k, m])

    def phi_err(self, l: int, k: int, m: int) -> np.ndarray:
        """Covariance of the estimation error; complements phi_est exactly."""
        return self.cov.R[l, k, m] - self.phi_est(l, k, m)

    def cross(self, l: int, k: int, m: int, m2: int) -> np.ndarray:
        """Cross-covariance E[est(k,m) est(k,m2)^H] at BS l."""
        scale = np.sqrt(self.pilot_powers[k, m] * self.pilot_powers[k, m2])
        return scale * (self.cov.R[l, k, m] @ self.W[l, k, m2])

    def pair_products(self, j: int, k: int) -> np.ndarray:
        """All products R[j,k,q] @ W[j,k,p], shape (L, L, M, M), index [q, p].

        These are the building blocks of every slow-fading trace; callers
        that need several of them share the result instead of recomputing.
        """
        L, M = self.n_cells, self.n_antennas
        R = self.cov.R[j, k]
        W = self.W[j, k]
        return np.matmul(R[:, None, :, :], W[None, :, :, :])


def build_estimation_model(cov: CovarianceSet, pilot_powers) -> EstimationModel:
    return EstimationModel(cov=cov, pilot_powers=np.asarray(pilot_powers, dtype=float))


def draw_true_channels(cov: CovarianceSet, rng: np.random.Generator,
                       n: int | None = None) -> np.ndarray:
    """Sample channels h[j, k, l] = R^(1/2) w with w ~ CN(0, I).

    With ``n`` given, a leading batch axis is added.
    """
    L, K, M = cov.n_cells, cov.users_per_cell, cov.n_antennas
    shape = (L, K, L, M) if n is None else (n, L, K, L, M)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    return np.einsum("jklab,...jklb->...jkla", cov.sqrt_factors(), w)


def estimate_channels(model: EstimationModel, true_channels: np.ndarray,
                      rng: np.random.Generator | None,
                      noise: np.ndarray | None = None):
    """MMSE estimates and residual errors from one pilot phase.

    ``true_channels`` is (..., L, K, L, M). Returns ``(estimates, errors)``
    of the same shape. The same observation t_{kl} feeds all co-pilot
    estimates, which is what makes them colinear transforms of one vector.
    Pass ``noise=None`` with an rng to draw it, or an explicit array
    (e.g. zeros) of shape (..., L, K, M).
    """
    p = model.pilot_powers
    t = np.einsum("kn,...lkna->...lka", np.sqrt(p), true_channels)
    if noise is None:
        if rng is None:
            raise SpecError("either an rng or an explicit noise array is required")
        noise = (rng.standard_normal(t.shape)
                 + 1j * rng.standard_normal(t.shape)) / np.sqrt(2.0)
    t = t + noise
    est = np.einsum("km,lkmab,...lka->...lkmb", np.sqrt(p), np.conj(model.W), t)
    return est, true_channels - est
