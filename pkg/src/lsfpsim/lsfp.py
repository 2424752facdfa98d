"""Slow-fading SINR closed forms and optimal inter-cell combining weights.

Combining weights for user index k form an L^2 x L matrix A_k; the entry
acting on the estimate of copy p produced at BS j, when decoding the user
of cell l, sits at row ``j * L + p`` and column ``l``. All L^2 vectors in
this module (weight columns, trace vectors, block-diagonal quadratic
kernels) share that row ordering, with the BS index j major.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericWarning, SpecError
from .estimation import EstimationModel
from .geometry import CovarianceSet

RAW = "raw"
PILOT_SCALED = "pilot_scaled"

#: Ratios are reported as this value when the denominator vanishes entirely.
SINR_CAP = 1e12


def vec_index(j: int, p: int, L: int) -> int:
    """Row of the (BS j, copy p) entry in every L^2 ordering used here."""
    return j * L + p


@dataclass
class LsfpSet:
    """Combining matrices for all users: ``a[k]`` is L^2 x L.

    ``scaling`` records whether rows carry the sqrt pilot-power factor
    ("pilot_scaled") or not ("raw"); the physical combiner uses raw weights
    while the matched-filter closed form expects pilot-scaled ones.
    """

    a: np.ndarray           # (K, L*L, L) complex
    scaling: str = RAW

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex)
        K, rows, L = self.a.shape
        if rows != L * L:
            raise SpecError("combining matrices must be L^2 x L")
        if self.scaling not in (RAW, PILOT_SCALED):
            raise SpecError(f"unknown scaling {self.scaling!r}")
        if not np.all(np.isfinite(self.a)):
            raise SpecError("combining weights must be finite")

    @property
    def n_cells(self) -> int:
        return self.a.shape[2]

    @property
    def users_per_cell(self) -> int:
        return self.a.shape[0]

    @classmethod
    def no_lsfp(cls, L: int, K: int) -> "LsfpSet":
        """Identity combining: each cell keeps only its own local estimate."""
        a = np.zeros((K, L * L, L), dtype=complex)
        for l in range(L):
            a[:, vec_index(l, l, L), l] = 1.0
        return cls(a=a, scaling=RAW)

    def _row_weights(self, pilot_powers: np.ndarray) -> np.ndarray:
        p = np.asarray(pilot_powers, dtype=float)
        L = self.n_cells
        copy_of_row = np.arange(L * L) % L
        return np.sqrt(p[:, copy_of_row])    # (K, L^2)

    def pilot_scaled(self, pilot_powers) -> "LsfpSet":
        if self.scaling == PILOT_SCALED:
            return self
        w = self._row_weights(pilot_powers)
        return LsfpSet(a=self.a * w[:, :, None], scaling=PILOT_SCALED)

    def raw(self, pilot_powers) -> "LsfpSet":
        if self.scaling == RAW:
            return self
        w = self._row_weights(pilot_powers)
        if np.any(w == 0):
            raise ConfigurationError("cannot unscale weights with zero pilot power")
        return LsfpSet(a=self.a / w[:, :, None], scaling=RAW)

    def to_json_dict(self) -> dict:
        return {"scaling": self.scaling,
                "re": self.a.real.tolist(), "im": self.a.imag.tolist()}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LsfpSet":
        a = np.asarray(doc["re"], dtype=float) + 1j * np.asarray(doc["im"], dtype=float)
        return cls(a=a, scaling=doc.get("scaling", RAW))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()) + "\n")

    @classmethod
    def load_json(cls, path) -> "LsfpSet":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class SlowFadingSummaries:
    """Trace statistics feeding the closed-form SINRs.

    * ``c[k, n]`` is the L^2 vector with entry (j, p) equal to
      tr(R[j,k,n] K[j,k]^-1 R[j,k,p]);
    * ``d_blocks[k, j]`` is the L x L kernel whose (p, p') entry is
      tr(R[j,k,p'] K^-1 R[j,k,p]) plus the data-power weighted interference
      traces, so it must be rebuilt whenever the data powers change;
    * ``e_blocks[k, j]``, when present, is the zero-forcing residual kernel
      for BS j and user k.
    """

    c: np.ndarray                    # (K, L, L^2)
    d_blocks: np.ndarray             # (K, L, L, L) index [k, j, p, p']
    q: np.ndarray                    # (K, L) data powers baked into d_blocks
    e_blocks: np.ndarray | None = None   # (K, L, L, L)
    _t1: np.ndarray | None = None        # (L, K, L, L) static part [j, k, p, p']
    _tbl: np.ndarray | None = None       # (L, K, K, L, L, L) [j, k, m, n, p, p']

    @property
    def n_cells(self) -> int:
        return self.c.shape[1]

    @property
    def users_per_cell(self) -> int:
        return self.c.shape[0]

    def with_data_powers(self, q) -> "SlowFadingSummaries":
        """Cheap rebuild of the q-dependent kernels from cached traces."""
        if self._t1 is None or self._tbl is None:
            raise ConfigurationError("summaries were built without cached traces")
        q = np.asarray(q, dtype=float)
        d = self._t1 + np.einsum("mn,jkmnpq->jkpq", q, self._tbl)
        return replace(self, d_blocks=d.transpose(1, 0, 2, 3), q=q)

    def with_gamma(self, gamma: np.ndarray) -> "SlowFadingSummaries":
        """Attach (or replace) the zero-forcing kernels, gamma[j, k]."""
        return replace(self, e_blocks=np.asarray(gamma).transpose(1, 0, 2, 3).copy())


def build_summaries(cov: CovarianceSet, model: EstimationModel, data_powers,
                    gamma: np.ndarray | None = None,
                    products=None) -> SlowFadingSummaries:
    """Compute every slow-fading trace needed by the closed forms.

    ``gamma``, shape (L, K, L, L) with gamma[j, k] the per-BS residual
    kernel, is required only for the zero-forcing path. ``products`` may
    supply precomputed ``model.pair_products`` results as products[j][k].
    """
    L, K = cov.n_cells, cov.users_per_cell
    q = np.asarray(data_powers, dtype=float)
    if q.shape != (K, L):
        raise SpecError(f"data powers must have shape {(K, L)}")

    c = np.einsum("jknab,jkpba->knjp", cov.R, model.W).reshape(K, L, L * L)
    t1 = np.einsum("jkqab,jkpba->jkpq", cov.R, model.W)
    tbl = np.empty((L, K, K, L, L, L), dtype=complex)
    for j in range(L):
        for k in range(K):
            prod = products[j][k] if products is not None \
                else model.pair_products(j, k)
            # tbl[j,k,m,n,p,p'] = tr(R[j,m,n] R[j,k,p'] K^-1 R[j,k,p])
            tbl[j, k] = np.einsum("mnab,qpba->mnpq", cov.R[j], prod)
    d = t1 + np.einsum("mn,jkmnpq->jkpq", q, tbl)

    e_blocks = None
    if gamma is not None:
        gamma = np.asarray(gamma)
        if gamma.shape != (L, K, L, L):
            raise SpecError(f"gamma must have shape {(L, K, L, L)}")
        e_blocks = gamma.transpose(1, 0, 2, 3).copy()

    return SlowFadingSummaries(c=c, d_blocks=d.transpose(1, 0, 2, 3), q=q,
                               e_blocks=e_blocks, _t1=t1, _tbl=tbl)


@dataclass
class MfSinrValue:
    sinr: float
    numerator: float
    i1: float
    i2: float
    i3: float
    degenerate: bool = False


@dataclass
class ZfSinrValue:
    sinr: float
    numerator: float
    i1: float
    i2: float
    degenerate: bool = False


def _block_quadform(weights_block: np.ndarray, kernel: np.ndarray) -> float:
    # sum_{p,p'} w*_p kernel[p,p'] w_p'
    return float(np.real(np.conj(weights_block) @ kernel @ weights_block))


def sinr_mf_closed(summaries: SlowFadingSummaries, lsfp: LsfpSet,
                   pilot_powers, data_powers, k: int, l: int) -> MfSinrValue:
    """Matched-filter SINR of user (k, l) for given pilot-scaled weights.

    The denominator splits into the co-pilot mean power i1, the
    interference second moments i2 (which include the self term), and the
    receiver noise i3.
    """
    if lsfp.scaling != PILOT_SCALED:
        raise ConfigurationError("matched-filter closed form expects pilot-scaled weights")
    if summaries._t1 is None:
        raise ConfigurationError("summaries were built without cached traces")
    p = np.asarray(pilot_powers, dtype=float)
    q = np.asarray(data_powers, dtype=float)
    if not np.array_equal(summaries.q, q):
        raise ConfigurationError(
            "summaries were built for different data powers; rebuild them first")
    L = summaries.n_cells
    a = lsfp.a[k, :, l]
    dots = np.conj(a) @ summaries.c[k].T          # (L,) entry n = a^H c_{kn}
    numerator = abs(dots[l]) ** 2 * p[k, l] * q[k, l]
    weights = p[k] * q[k]
    i1 = float(np.sum(np.abs(dots) ** 2 * weights) - abs(dots[l]) ** 2 * weights[l])
    blocks = a.reshape(L, L)
    t1k = summaries._t1[:, k]                     # (L, L, L) index [j, p, p']
    qpart = summaries.d_blocks[k] - t1k
    i2 = sum(_block_quadform(blocks[j], qpart[j]) for j in range(L))
    i3 = sum(_block_quadform(blocks[j], t1k[j]) for j in range(L))
    denom = i1 + i2 + i3
    if denom <= 0.0:
        return MfSinrValue(0.0, numerator, i1, i2, i3, degenerate=True)
    return MfSinrValue(numerator / denom, numerator, i1, i2, i3)


def sinr_zf_closed(summaries: SlowFadingSummaries, lsfp: LsfpSet,
                   data_powers, k: int, l: int) -> ZfSinrValue:
    """Zero-forcing SINR of user (k, l) for given raw weights.

    Follows the large-array approximation literally: the numerator and the
    co-pilot term use the data powers only, while the residual
    interference-plus-noise is the quadratic form of the weights against
    the per-BS kernels.
    """
    if lsfp.scaling != RAW:
        raise ConfigurationError("zero-forcing closed form expects raw weights")
    if summaries.e_blocks is None:
        raise ConfigurationError(
            "summaries lack the zero-forcing kernels; build them with gamma")
    q = np.asarray(data_powers, dtype=float)
    L = summaries.n_cells
    blocks = lsfp.a[k, :, l].reshape(L, L)
    col_sums = blocks.sum(axis=0)                 # entry n = sum_j a_{kljn}
    numerator = abs(col_sums[l]) ** 2 * q[k, l]
    i1 = float(np.sum(np.abs(col_sums) ** 2 * q[k]) - abs(col_sums[l]) ** 2 * q[k, l])
    i2 = sum(_block_quadform(blocks[j], summaries.e_blocks[k, j]) for j in range(L))
    denom = i1 + i2
    if denom <= 0.0:
        if numerator > 0.0:
            return ZfSinrValue(SINR_CAP, numerator, i1, i2, degenerate=True)
        return ZfSinrValue(0.0, numerator, i1, i2, degenerate=True)
    return ZfSinrValue(numerator / denom, numerator, i1, i2)


@dataclass
class SinrReport:
    """Per-user SINR with its power decomposition and provenance."""

    sinr: np.ndarray                 # (K, L)
    useful: np.ndarray               # (K, L)
    pilot_contamination: np.ndarray  # (K, L)
    interference_noise: np.ndarray   # (K, L)
    provenance: str

    @property
    def rate_bps_hz(self) -> np.ndarray:
        return np.log2(1.0 + self.sinr)

    @property
    def sinr_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.sinr)


def _ridge_solve(mat: np.ndarray, rhs: np.ndarray, what: str):
    try:
        sol = np.linalg.solve(mat, rhs)
        if np.all(np.isfinite(sol.view(float))):
            return sol
    except np.linalg.LinAlgError:
        pass
    n = mat.shape[0]
    ridge = 1e-12 * np.trace(mat).real / n
    warnings.warn(f"singular system in {what}; applying ridge {ridge:.3e}",
                  NumericWarning, stacklevel=3)
    return np.linalg.solve(mat + ridge * np.eye(n), rhs)


def optimal_lsfp(summaries: SlowFadingSummaries, pilot_powers, data_powers,
                 receiver: str) -> tuple[LsfpSet, SinrReport]:
    """Best combining weights and the SINR they achieve, per user.

    For the matched filter the weights solve a regularized least squares
    in the trace vectors; for zero forcing the same structure applies with
    the replica-sum selectors and the residual kernels. Both are linear
    Hermitian solves, one right-hand side per serving cell.
    """
    K, L = summaries.users_per_cell, summaries.n_cells
    p = np.asarray(pilot_powers, dtype=float)
    q = np.asarray(data_powers, dtype=float)
    if not np.array_equal(summaries.q, q):
        raise ConfigurationError(
            "summaries were built for different data powers; rebuild them first")

    a = np.zeros((K, L * L, L), dtype=complex)
    sinr = np.zeros((K, L))
    useful = np.zeros((K, L))
    pc = np.zeros((K, L))
    rin = np.zeros((K, L))

    if receiver == "mf":
        for k in range(K):
            d_full = np.zeros((L * L, L * L), dtype=complex)
            for j in range(L):
                d_full[j * L:(j + 1) * L, j * L:(j + 1) * L] = summaries.d_blocks[k, j]
            cc = summaries.c[k]                       # (L, L^2), row n
            weights = p[k] * q[k]
            total = (cc.T * weights) @ cc.conj()      # sum_n c c^H p q
            for l in range(L):
                mat = total - weights[l] * np.outer(cc[l], cc[l].conj()) + d_full
                a_kl = _ridge_solve(mat, cc[l], "optimal mf combining")
                a[k, :, l] = a_kl
                value = float(np.real(np.vdot(cc[l], a_kl))) * weights[l]
                sinr[k, l] = max(value, 0.0)
                dots = np.conj(a_kl) @ cc.T
                useful[k, l] = abs(dots[l]) ** 2 * weights[l]
                pc[k, l] = float(np.sum(np.abs(dots) ** 2 * weights)) - useful[k, l]
                blocks = a_kl.reshape(L, L)
                rin[k, l] = sum(_block_quadform(blocks[j], summaries.d_blocks[k, j])
                                for j in range(L))
        out = LsfpSet(a=a, scaling=PILOT_SCALED)
    elif receiver == "zf":
        if summaries.e_blocks is None:
            raise ConfigurationError(
                "summaries lack the zero-forcing kernels; build them with gamma")
        # weights maximizing the zero-forcing ratio in its own (raw) units;
        # data powers alone weigh the co-pilot selectors, and the achieved
        # value carries q only, which is what the Monte Carlo replay attains
        eta = np.kron(np.ones((L, 1)), np.eye(L))     # (L^2, L), column n
        for k in range(K):
            e_full = np.zeros((L * L, L * L), dtype=complex)
            for j in range(L):
                e_full[j * L:(j + 1) * L, j * L:(j + 1) * L] = summaries.e_blocks[k, j]
            weights = q[k]
            total = (eta * weights) @ eta.T
            for l in range(L):
                mat = total - weights[l] * np.outer(eta[:, l], eta[:, l]) + e_full
                a_kl = _ridge_solve(mat, eta[:, l].astype(complex),
                                    "optimal zf combining")
                a[k, :, l] = a_kl
                value = float(np.real(eta[:, l] @ a_kl)) * weights[l]
                sinr[k, l] = max(value, 0.0)
                dots = np.conj(a_kl) @ eta            # entry n = a^H eta_n
                useful[k, l] = abs(dots[l]) ** 2 * weights[l]
                pc[k, l] = float(np.sum(np.abs(dots) ** 2 * weights)) - useful[k, l]
                blocks = a_kl.reshape(L, L)
                rin[k, l] = sum(_block_quadform(blocks[j], summaries.e_blocks[k, j])
                                for j in range(L))
        out = LsfpSet(a=a, scaling=RAW)
    else:
        raise SpecError(f"unknown receiver {receiver!r}")

    report = SinrReport(sinr=sinr, useful=useful, pilot_contamination=pc,
                        interference_noise=rin,
                        provenance=f"closed-form optimal lsfp ({receiver})")
    return out, report


def closed_form_report(summaries: SlowFadingSummaries, lsfp: LsfpSet,
                       pilot_powers, data_powers, receiver: str) -> SinrReport:
    """Evaluate the closed-form SINR of every user at fixed weights."""
    K, L = summaries.users_per_cell, summaries.n_cells
    sinr = np.zeros((K, L))
    useful = np.zeros((K, L))
    pc = np.zeros((K, L))
    rin = np.zeros((K, L))
    if receiver == "mf":
        scaled = lsfp.pilot_scaled(pilot_powers)
        for k in range(K):
            for l in range(L):
                val = sinr_mf_closed(summaries, scaled, pilot_powers, data_powers, k, l)
                sinr[k, l] = val.sinr
                useful[k, l] = val.numerator
                pc[k, l] = val.i1
                rin[k, l] = val.i2 + val.i3
    elif receiver == "zf":
        raw = lsfp.raw(pilot_powers) if lsfp.scaling != RAW else lsfp
        for k in range(K):
            for l in range(L):
                val = sinr_zf_closed(summaries, raw, data_powers, k, l)
                sinr[k, l] = val.sinr
                useful[k, l] = val.numerator
                pc[k, l] = val.i1
                rin[k, l] = val.i2
    else:
        raise SpecError(f"unknown receiver {receiver!r}")
    return SinrReport(sinr=sinr, useful=useful, pilot_contamination=pc,
                      interference_noise=rin,
                      provenance=f"closed-form fixed lsfp ({receiver})")
