"""Network geometry, path loss, and spatial covariance generation.

Conventions used throughout the package:

* index order ``[j, k, l]`` means: receiving base station ``j``, user index
  ``k``, user's home cell ``l``;
* all linear powers are in mW and all channel gains are normalized so the
  receiver thermal noise has unit variance (``beta`` carries units 1/mW);
* angles are radians, distances kilometres unless a suffix says otherwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import QuadratureError, SpecError

ONE_RING = "one-ring"
UNCORRELATED = "uncorrelated"

THERMAL_NOISE_DBM_PER_HZ = -174.0
#: BS antenna gain credited to every uplink signal (dB).
ANTENNA_GAIN_DB = 2.0
#: Extra margin term carried by the reported noise-variance formula (dB).
RX_MARGIN_DB = 2.0
#: Users are never dropped closer than this to their own BS.
EXCLUSION_RADIUS_KM = 0.035

SCENARIO_SCHEMA = 1
_COV_MAGIC = b"RCOV"
_LEGGAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


@dataclass(frozen=True)
class NetworkScenario:
    """Static geometry and radio parameters of a multicell network."""

    n_cells: int
    users_per_cell: int
    n_antennas: int
    cell_radius_km: float = 1.0
    scattering_radius_m: float = 20.0
    antenna_spacing: float = 0.5
    sigma_shadow_db: float = 8.0
    q_max_mw: float = 200.0
    bandwidth_hz: float = 20e6
    noise_figure_db: float = 4.0
    rng_seed: int = 0
    correlation_mode: str = ONE_RING

    def __post_init__(self):
        if self.n_cells < 1 or self.users_per_cell < 1 or self.n_antennas < 1:
            raise SpecError("cell, user and antenna counts must be >= 1")
        for name in ("cell_radius_km", "scattering_radius_m", "antenna_spacing",
                     "q_max_mw", "bandwidth_hz"):
            if getattr(self, name) <= 0:
                raise SpecError(f"{name} must be strictly positive")
        if self.sigma_shadow_db < 0:
            raise SpecError("sigma_shadow_db must be >= 0")
        if self.correlation_mode not in (ONE_RING, UNCORRELATED):
            raise SpecError(f"unknown correlation_mode {self.correlation_mode!r}")

    @property
    def noise_power_dbm(self) -> float:
        """Noise power used for unit-variance normalization (thermal + NF).

        The 2 dB margin that appears in :func:`noise_variance_dbm` is the
        counterpart of the BS antenna gain; keeping it out of the
        normalization anchors a full-power cell-edge user near -6 dB SNR.
        """
        return THERMAL_NOISE_DBM_PER_HZ + 10.0 * np.log10(self.bandwidth_hz) \
            + self.noise_figure_db

    @property
    def q_max(self) -> float:
        """Maximum per-user transmit power, linear mW."""
        return self.q_max_mw

    def to_json_dict(self) -> dict:
        return {
            "schema": SCENARIO_SCHEMA,
            "n_cells": self.n_cells,
            "users_per_cell": self.users_per_cell,
            "n_antennas": self.n_antennas,
            "cell_radius_km": self.cell_radius_km,
            "scattering_radius_m": self.scattering_radius_m,
            "antenna_spacing": self.antenna_spacing,
            "sigma_shadow_db": self.sigma_shadow_db,
            "q_max_mw": self.q_max_mw,
            "bandwidth_hz": self.bandwidth_hz,
            "noise_figure_db": self.noise_figure_db,
            "rng_seed": self.rng_seed,
            "correlation_mode": self.correlation_mode,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NetworkScenario":
        if not isinstance(doc, dict):
            raise SpecError("scenario document must be a JSON object")
        if doc.get("schema") != SCENARIO_SCHEMA:
            raise SpecError(f"unsupported scenario schema {doc.get('schema')!r}")
        kwargs = {k: v for k, v in doc.items() if k != "schema"}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise SpecError(f"bad scenario field: {exc}") from exc


def save_scenario(scenario: NetworkScenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_json_dict(), indent=2) + "\n")


def load_scenario(path) -> NetworkScenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read scenario file: {exc}") from exc
    return NetworkScenario.from_json_dict(doc)


def noise_variance_dbm(bandwidth_hz: float, noise_figure_db: float) -> float:
    """Reported receiver noise variance: -174 + 10 log10(B) + NF + 2 (dBm)."""
    return THERMAL_NOISE_DBM_PER_HZ + 10.0 * np.log10(bandwidth_hz) \
        + noise_figure_db + RX_MARGIN_DB


def urban_macro_loss_db(distance_km) -> np.ndarray | float:
    """Urban-macro path loss at 850 MHz: 10 log10(gain) = -127.8 - 35 log10(d)."""
    d = np.asarray(distance_km, dtype=float)
    if np.any(d <= 0):
        raise SpecError("distance must be strictly positive")
    return -127.8 - 35.0 * np.log10(d)


def path_gain(distance_km, shadow_db, noise_power_dbm) -> np.ndarray | float:
    """Linear channel gain relative to unit-variance receiver noise (1/mW).

    Urban-macro loss plus lognormal shadowing, credited with the BS antenna
    gain and referred to the given noise power so that AWGN has variance 1.
    """
    gain_db = urban_macro_loss_db(distance_km) + np.asarray(shadow_db, dtype=float) \
        + ANTENNA_GAIN_DB - noise_power_dbm
    return 10.0 ** (gain_db / 10.0)


def hexagonal_cell_positions(n_cells: int, cell_radius_km: float) -> np.ndarray:
    """BS coordinates on a hexagonal grid, centre cell first, then rings.

    Inter-site distance is sqrt(3) * cell_radius, the classical layout for
    cells whose far corner sits at ``cell_radius``. Within a ring, sites are
    ordered by azimuth. Returns an (n_cells, 2) array in km.
    """
    spacing = np.sqrt(3.0) * cell_radius_km
    positions = [(0.0, 0.0)]
    ring = 1
    while len(positions) < n_cells:
        cands = []
        for q in range(-ring, ring + 1):
            for r in range(-ring, ring + 1):
                if (abs(q) + abs(r) + abs(q + r)) // 2 == ring:
                    x = spacing * (q + 0.5 * r)
                    y = spacing * (np.sqrt(3.0) / 2.0) * r
                    cands.append((np.arctan2(y, x) % (2 * np.pi), x, y))
        cands.sort()
        positions.extend((x, y) for _, x, y in cands)
        ring += 1
    return np.asarray(positions[:n_cells], dtype=float)


@dataclass
class UserDrop:
    """One random placement of all users plus derived link geometry.

    ``positions[k, l]`` is the (x, y) of user k in cell l. The link arrays
    are indexed ``[j, k, l]`` (BS j, user k of cell l).
    """

    bs_positions: np.ndarray   # (L, 2)
    positions: np.ndarray      # (K, L, 2)
    distances_km: np.ndarray   # (L, K, L)
    angles: np.ndarray         # (L, K, L)
    spreads: np.ndarray        # (L, K, L)
    shadow_db: np.ndarray      # (L, K, L)


def drop_users(scenario: NetworkScenario) -> UserDrop:
    """Drop users uniformly on each cell's disk and compute link geometry.

    Deterministic in ``scenario.rng_seed``. The angular half-width seen at a
    BS is arctan(scattering radius / link distance).
    """
    L, K = scenario.n_cells, scenario.users_per_cell
    rng = np.random.default_rng(scenario.rng_seed)
    bs = hexagonal_cell_positions(L, scenario.cell_radius_km)

    positions = np.empty((K, L, 2))
    for l in range(L):
        # uniform on the annulus between the exclusion and the cell radius
        radius = np.sqrt(rng.uniform(EXCLUSION_RADIUS_KM ** 2,
                                     scenario.cell_radius_km ** 2, size=K))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=K)
        positions[:, l, 0] = bs[l, 0] + radius * np.cos(phi)
        positions[:, l, 1] = bs[l, 1] + radius * np.sin(phi)

    delta_xy = positions[None, :, :, :] - bs[:, None, None, :]   # (L, K, L, 2)
    distances = np.hypot(delta_xy[..., 0], delta_xy[..., 1])
    angles = np.arctan2(delta_xy[..., 1], delta_xy[..., 0])
    spreads = np.arctan((scenario.scattering_radius_m / 1000.0) / distances)
    shadow = rng.normal(0.0, scenario.sigma_shadow_db, size=(L, K, L))
    return UserDrop(bs_positions=bs, positions=positions, distances_km=distances,
                    angles=angles, spreads=spreads, shadow_db=shadow)


def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _LEGGAUSS_CACHE:
        _LEGGAUSS_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _LEGGAUSS_CACHE[n]


def _lag_profile(theta: float, delta: float, M: int, spacing: float,
                 n_nodes: int) -> np.ndarray:
    """Gauss-Legendre value of the arrival-phase integral for lags 0..M-1."""
    x, w = _leggauss(n_nodes)
    phase = 2.0 * np.pi * spacing * np.sin(delta * x + theta)
    c = 0.5 * (w[:, None] * np.exp(1j * np.outer(phase, np.arange(M)))).sum(axis=0)
    c[0] = 1.0  # integrand is identically 1 at zero lag
    return c


def one_ring_covariance(beta: float, theta: float, delta: float, M: int,
                        spacing: float, tol: float = 1e-9,
                        max_nodes: int = 1 << 14) -> np.ndarray:
    """Hermitian Toeplitz ULA covariance for a ring of scatterers.

    Entry (m, p) is ``beta`` times the average over arrival angles in
    [theta - delta, theta + delta] of exp(j 2 pi spacing sin(angle) (m - p)).
    The quadrature doubles its node count until the lag profile changes by
    less than ``tol`` in relative 2-norm.
    """
    if beta <= 0:
        raise SpecError("beta must be strictly positive")
    if not 0 < delta <= np.pi / 2:
        raise SpecError("delta must lie in (0, pi/2]")
    n = 32
    c_prev = _lag_profile(theta, delta, M, spacing, n)
    while True:
        n *= 2
        if n > max_nodes:
            raise QuadratureError(
                f"lag profile did not converge below {tol} with {max_nodes} nodes")
        c = _lag_profile(theta, delta, M, spacing, n)
        if np.linalg.norm(c - c_prev) <= tol * np.linalg.norm(c):
            break
        c_prev = c
    lag = np.subtract.outer(np.arange(M), np.arange(M))
    prof = c[np.abs(lag)]
    return beta * np.where(lag >= 0, prof, np.conj(prof))


@dataclass
class CovarianceSet:
    """All slow-fading state: R[j, k, l] covariances and beta[j, k, l] gains."""

    R: np.ndarray             # (L, K, L, M, M) complex
    beta: np.ndarray          # (L, K, L) float
    correlation_mode: str
    _sqrt: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_cells(self) -> int:
        return self.R.shape[0]

    @property
    def users_per_cell(self) -> int:
        return self.R.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.R.shape[3]

    def sqrt_factors(self) -> np.ndarray:
        """Hermitian square roots of every covariance, eigenvalues clamped at 0."""
        if self._sqrt is None:
            vals, vecs = np.linalg.eigh(self.R)
            vals = np.maximum(vals, 0.0)
            self._sqrt = np.einsum("...ab,...b,...cb->...ac",
                                   vecs, np.sqrt(vals), np.conj(vecs))
        return self._sqrt

    def validate(self, hermitian_tol: float = 1e-10, psd_tol: float = 1e-8,
                 diag_tol: float = 1e-9) -> None:
        """Check Hermitian symmetry, positive semidefiniteness, diagonal."""
        RH = np.conj(np.swapaxes(self.R, -1, -2))
        herm = np.linalg.norm(self.R - RH, axis=(-2, -1))
        scale = np.linalg.norm(self.R, axis=(-2, -1))
        if np.any(herm > hermitian_tol * scale):
            raise SpecError("covariance matrix is not Hermitian within tolerance")
        eigs = np.linalg.eigvalsh(self.R)
        traces = np.trace(self.R, axis1=-2, axis2=-1).real
        if np.any(eigs[..., 0] < -psd_tol * traces / self.n_antennas):
            raise SpecError("covariance matrix has a significantly negative eigenvalue")
        diags = np.diagonal(self.R, axis1=-2, axis2=-1)
        if np.any(np.abs(diags - self.beta[..., None]) > diag_tol * self.beta[..., None]):
            raise SpecError("covariance diagonal deviates from the path gain")

    def save_binary(self, path) -> None:
        """Little-endian dump: magic, version, L/K/M, beta, interleaved re/im R."""
        L, K, M = self.n_cells, self.users_per_cell, self.n_antennas
        with open(path, "wb") as fh:
            fh.write(_COV_MAGIC)
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<3q", L, K, M))
            fh.write(self.beta.astype("<f8").tobytes())
            inter = np.empty(self.R.shape + (2,))
            inter[..., 0] = self.R.real
            inter[..., 1] = self.R.imag
            fh.write(inter.astype("<f8").tobytes())

    @classmethod
    def load_binary(cls, path) -> "CovarianceSet":
        with open(path, "rb") as fh:
            if fh.read(4) != _COV_MAGIC:
                raise SpecError("not a covariance dump")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != 1:
                raise SpecError(f"unsupported covariance dump version {version}")
            L, K, M = struct.unpack("<3q", fh.read(24))
            beta = np.frombuffer(fh.read(L * K * L * 8), dtype="<f8").reshape(L, K, L)
            raw = np.frombuffer(fh.read(L * K * L * M * M * 2 * 8), dtype="<f8")
            inter = raw.reshape(L, K, L, M, M, 2)
            R = inter[..., 0] + 1j * inter[..., 1]
        return cls(R=np.ascontiguousarray(R), beta=beta.copy(),
                   correlation_mode="unknown")


def build_covariance_set(scenario: NetworkScenario, drop: UserDrop) -> CovarianceSet:
    """Covariances and normalized path gains for every (BS, user, cell) link."""
    L, K, M = scenario.n_cells, scenario.users_per_cell, scenario.n_antennas
    noise_dbm = scenario.noise_power_dbm
    beta = path_gain(drop.distances_km, drop.shadow_db, noise_dbm)
    R = np.empty((L, K, L, M, M), dtype=complex)
    if scenario.correlation_mode == UNCORRELATED:
        R[:] = np.eye(M)
        R *= beta[..., None, None]
    else:
        for j in range(L):
            for k in range(K):
                for l in range(L):
                    R[j, k, l] = one_ring_covariance(
                        beta[j, k, l], drop.angles[j, k, l], drop.spreads[j, k, l],
                        M, scenario.antenna_spacing)
    return CovarianceSet(R=R, beta=beta, correlation_mode=scenario.correlation_mode)


def scenario_with_seed(scenario: NetworkScenario, seed: int) -> NetworkScenario:
    return replace(scenario, rng_seed=seed)
