"""Deterministic equivalents of the zero-forcing resolvent traces.

For one base station, the normalized Gram matrix of all scaled channel
estimates is ``B = sum_{k,n} g_{kn} g_{kn}^H`` with ``g_{kn}`` the estimate
of user (k, n) divided by sqrt(M). Estimates of the same user index k are
colinear transforms of one pilot observation, with cross-covariance
``E[g_{kp} g_{kn}^H] = rbar[k, p, n] / M``. This module computes, without
any sampling,

* ``f[k, q, n] ~ (1/M) tr(rbar[k,q,n] (B - z I)^-1)`` via a coupled fixed
  point in the L x L matrices ``F_k`` (entry (n, q) holds f[k, q, n]);
* ``fbar[k, q, n] ~ (1/M) tr(rbar[k,q,n] (B - zI)^-1 Lam (B - zI)^-1)``
  via one linear system, obtained by differentiating the fixed point with
  respect to a perturbation of B in the direction -Lam;
* their z -> 0- limits ``-z f`` and ``z^2 fbar``, either through a direct
  limiting system (obtained by substituting the 1/z blow-up ansatz, which
  replaces ``(I + F^T)^-1`` by ``-z (Ftilde^T)^-1``) or through solves on a
  small-z sequence extrapolated to zero;
* the residual interference kernel ``Gamma_k``, whose (n, p) entry is the
  limit of the zero-forcing quadratic form v_{kn}^H Lam v_{kp}.

The fixed point uses the identity (I + F^T)^-1 f_n = e_n - (I + F^T)^-1 e_n
to write the self-energy compactly: T = (1/M) sum_k sum_{n,p}
[(I + F_k^T)^-1]_{p,n} rbar[k, n, p] - z I.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigurationError, ConvergenceError, NumericWarning,
                     NumericError, SingularityError, SpecError)
from .estimation import EstimationModel
from .geometry import CovarianceSet

DEFAULT_Z_SEQUENCE = (-1e-2, -1e-3, -1e-4, -1e-5)
FTILDE_CONDITION_LIMIT = 1e10
GAMMA_ASYMMETRY_LIMIT = 1e-6
EXTRAPOLATION_WARN = 1e-4
DUAL_PATH_TOL = 1e-3


@dataclass
class DetEquivProblem:
    """Inputs of the deterministic-equivalent system for one base station.

    ``rbar[k, p, n]`` is the scaled cross-covariance of the estimates of
    user index k from cells p and n; ``lam`` is the residual interference
    plus noise matrix (estimation errors weighted by data powers, plus the
    identity).
    """

    rbar: np.ndarray                  # (K, L, L, M, M)
    lam: np.ndarray                   # (M, M)
    cell: int = 0
    _phi_err: np.ndarray | None = field(default=None, repr=False)

    @property
    def users_per_cell(self) -> int:
        return self.rbar.shape[0]

    @property
    def n_cells(self) -> int:
        return self.rbar.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.rbar.shape[3]

    def validate(self, tol: float = 1e-8) -> None:
        lam_eigs = np.linalg.eigvalsh(self.lam)
        if lam_eigs[0] < 1.0 - tol * max(1.0, lam_eigs[-1]):
            raise SpecError("lam must dominate the identity")
        for k in range(self.users_per_cell):
            for n in range(self.n_cells):
                block = self.rbar[k, n, n]
                if np.linalg.eigvalsh(block)[0] < -tol * np.trace(block).real:
                    raise SpecError("diagonal rbar block is not PSD")

    def with_data_powers(self, data_powers) -> "DetEquivProblem":
        """Rebuild lam for new data powers; rbar does not depend on them."""
        if self._phi_err is None:
            raise ConfigurationError(
                "problem was built without cached error covariances")
        q = np.asarray(data_powers, dtype=float)
        M = self.n_antennas
        lam = np.eye(M) + np.einsum("kn,knab->ab", q, self._phi_err)
        return replace(self, lam=lam)


def build_det_equiv_problem(cov: CovarianceSet, model: EstimationModel,
                            data_powers, cell: int,
                            products: np.ndarray | None = None) -> DetEquivProblem:
    """Assemble the per-cell problem from covariance and estimation state.

    ``products``, if given, is the (K, L, L, M, M) stack of
    ``model.pair_products(cell, k)`` results.
    """
    K, L, M = cov.users_per_cell, cov.n_cells, cov.n_antennas
    q = np.asarray(data_powers, dtype=float)
    p = model.pilot_powers
    rbar = np.empty((K, L, L, M, M), dtype=complex)
    phi_err = np.empty((K, L, M, M), dtype=complex)
    for k in range(K):
        prod = products[k] if products is not None else model.pair_products(cell, k)
        scale = np.sqrt(np.outer(p[k], p[k]))
        rbar[k] = prod * scale[:, :, None, None]
        for n in range(L):
            phi_err[k, n] = cov.R[cell, k, n] - p[k, n] * prod[n, n]
    lam = np.eye(M) + np.einsum("kn,knab->ab", q, phi_err)
    return DetEquivProblem(rbar=rbar, lam=lam, cell=cell, _phi_err=phi_err)


@dataclass
class FixedPointSolution:
    """Converged F matrices plus the self-energy matrix they induce."""

    F: np.ndarray            # (K, L, L), [F_k]_{n,q} = f[k, q, n]
    T: np.ndarray            # (M, M)
    z: float
    iterations: int
    residuals: list[float]

    def f(self, k: int, q: int, n: int) -> complex:
        return self.F[k, n, q]


def _self_energy(rbar: np.ndarray, coeff: np.ndarray, shift: complex) -> np.ndarray:
    """T = shift * I + (1/M) sum_k sum_{n,p} coeff[k, p, n] rbar[k, n, p]."""
    M = rbar.shape[-1]
    T = np.einsum("kpn,knpab->ab", coeff, rbar) / M
    T[np.diag_indices(M)] += shift
    return T


def _trace_against(rbar: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """(1/M) tr(rbar[k, q, n] @ mat) for every (k, q, n)."""
    return np.einsum("kqnab,ba->kqn", rbar, mat) / rbar.shape[-1]


def solve_fixed_point(problem: DetEquivProblem, z: float, tol: float = 1e-10,
                      max_iter: int = 500, damping: float = 0.5,
                      f0: np.ndarray | None = None) -> FixedPointSolution:
    """Damped Picard iteration for the resolvent traces at spectral point z.

    Starts from F = 0 (or a warm start), halves the damping whenever the
    residual grows, and stops when the largest entry change falls below
    ``tol`` (scaled by the magnitude of F).
    """
    if z >= 0:
        raise SpecError("the spectral parameter must satisfy z < 0")
    K, L = problem.users_per_cell, problem.n_cells
    F = np.zeros((K, L, L), dtype=complex) if f0 is None else np.array(f0, dtype=complex)
    eye = np.eye(L)
    residuals: list[float] = []
    damp = damping
    last = np.inf
    for it in range(1, max_iter + 1):
        try:
            A = np.linalg.inv(eye + F.transpose(0, 2, 1))
        except np.linalg.LinAlgError as exc:
            raise SingularityError(
                f"I + F^T became singular at iteration {it}") from exc
        T = _self_energy(problem.rbar, A, -z)
        f_new = _trace_against(problem.rbar, np.linalg.inv(T))
        F_new = f_new.transpose(0, 2, 1)
        step = F_new - F
        residual = float(np.max(np.abs(step)))
        residuals.append(residual)
        if residual > last:
            damp = max(damp * 0.5, 0.05)
        last = residual
        F = F + damp * step
        if residual <= tol * max(1.0, float(np.max(np.abs(F)))):
            A = np.linalg.inv(eye + F.transpose(0, 2, 1))
            T = _self_energy(problem.rbar, A, -z)
            return FixedPointSolution(F=F, T=T, z=z, iterations=it,
                                      residuals=residuals)
    raise ConvergenceError(
        f"fixed point did not converge in {max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})")


def _derivative_operator(rbar: np.ndarray, t_inv: np.ndarray,
                         coeff_inv: np.ndarray):
    """Linear operator and right-hand-side map of the perturbation system.

    ``coeff_inv[m]`` is (I + F_m^T)^-1 at finite z, or (Ftilde_m^T)^-1 in
    the limit system; ``t_inv`` is the matching inverse self-energy.
    Returns ``(system, b_map)`` where the unknowns x (flattened over
    (m, q, n)) satisfy ``system @ x = b_map @ vec(lam) / M`` for any
    perturbation direction lam.
    """
    K, L, M = rbar.shape[0], rbar.shape[1], rbar.shape[-1]
    R = K * L * L
    flat = rbar.reshape(R, M, M)
    sandwich = t_inv @ flat @ t_inv                      # (R, M, M)
    # v[r, s] = (1/M) tr(rbar_r T^-1 rbar_s T^-1) via flattened transposes
    flat_t = flat.transpose(0, 2, 1).reshape(R, M * M)
    v = (flat_t @ sandwich.reshape(R, M * M).T) / M
    v4 = v.reshape(R, K, L, L)
    coupling = np.einsum("rmnp,mps,mtn->rmst", v4, coeff_inv, coeff_inv) / M
    system = np.eye(R, dtype=complex) - coupling.reshape(R, R)
    b_map = sandwich.transpose(0, 2, 1).reshape(R, M * M)
    return system, b_map


def _derivative_solve(rbar: np.ndarray, t_inv: np.ndarray, coeff_inv: np.ndarray,
                      lam: np.ndarray) -> np.ndarray:
    """Shared linear solve for the perturbation traces.

    Returns the result in the (K, L, L) matrix convention [m][n, q].
    """
    K, L, M = rbar.shape[0], rbar.shape[1], rbar.shape[-1]
    system, b_map = _derivative_operator(rbar, t_inv, coeff_inv)
    b = b_map @ lam.reshape(-1) / M
    try:
        x = np.linalg.solve(system, b)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("perturbation system is singular; condition "
                               f"~{np.linalg.cond(system):.2e}") from exc
    return x.reshape(K, L, L).transpose(0, 2, 1)


def solve_derivative_system(problem: DetEquivProblem,
                            fixed_point: FixedPointSolution,
                            lam: np.ndarray | None = None) -> np.ndarray:
    """Deterministic equivalent of the Lam-weighted double resolvent trace.

    Returns Fbar in the same (K, L, L) matrix convention as F. A zero Lam
    yields exactly zero (the system is homogeneous).
    """
    lam = problem.lam if lam is None else lam
    eye = np.eye(problem.n_cells)
    coeff_inv = np.linalg.inv(eye + fixed_point.F.transpose(0, 2, 1))
    t_inv = np.linalg.inv(fixed_point.T)
    return _derivative_solve(problem.rbar, t_inv, coeff_inv, lam)


@dataclass
class ZLimits:
    """Small-z limits of the scaled traces, plus solver diagnostics."""

    f_tilde: np.ndarray               # (K, L, L) limit of -z f, matrix convention
    fbar_tilde: np.ndarray            # (K, L, L) limit of z^2 fbar
    method: str                       # "direct" or "z-sequence"
    t_hat: np.ndarray | None = None   # limiting self-energy (direct method)
    extrapolation_residual: float | None = None
    dual_path_gap: float | None = None


def _scaled_fixed_point(problem: DetEquivProblem, z: float = 0.0,
                        tol: float = 1e-12, max_iter: int = 2000,
                        damping: float = 0.5, init: np.ndarray | None = None):
    """Fixed point in the scaled traces g = -z f (well-behaved down to z = 0).

    Writing G = -z F turns (I + F^T)^-1 into -z (G^T - z I)^-1, so the
    rescaled self-energy That = I + (1/M) sum [(G^T - zI)^-1]_{p,n}
    rbar[k,n,p] stays O(1) and the traces solve g = (1/M) tr(rbar That^-1).
    At z = 0 this is the direct limiting system.
    """
    K, L, M = problem.users_per_cell, problem.n_cells, problem.n_antennas
    if z == 0.0 and M <= K * L:
        raise ConfigurationError(
            "the z->0 limit needs more antennas than combined estimates")
    if init is None:
        diag0 = np.einsum("knnaa->kn", problem.rbar).real / M
        scale = max((M - K * L) / M, 0.5 / M)
        G = np.zeros((K, L, L), dtype=complex)
        for k in range(K):
            G[k] = np.diag(np.maximum(diag0[k], 1e-300) * scale)
    else:
        G = np.array(init, dtype=complex)
    shift = z * np.eye(L)
    damp = damping
    last = np.inf
    for it in range(1, max_iter + 1):
        try:
            coeff = np.linalg.inv(G.transpose(0, 2, 1) - shift)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("scaled trace matrix became singular during "
                                   f"the limit solve (iteration {it})") from exc
        t_hat = _self_energy(problem.rbar, coeff, 1.0)
        g_new = _trace_against(problem.rbar, np.linalg.inv(t_hat))
        G_new = g_new.transpose(0, 2, 1)
        residual = float(np.max(np.abs(G_new - G)))
        if residual > last:
            damp = max(damp * 0.5, 0.05)
        last = residual
        G = G + damp * (G_new - G)
        if residual <= tol * max(1.0, float(np.max(np.abs(G)))):
            coeff = np.linalg.inv(G.transpose(0, 2, 1) - shift)
            t_hat = _self_energy(problem.rbar, coeff, 1.0)
            return G, t_hat, it
    raise ConvergenceError(
        f"scaled fixed point at z={z} did not converge in {max_iter} "
        f"iterations (last residual {last:.3e})")


def _neville_to_zero(zs, values):
    """Polynomial extrapolation of values(z) to z = 0 with residual estimate.

    The scaled traces admit power-series expansions around z = 0-, so a
    Neville tableau over the solve grid converges rapidly; the residual is
    the gap between the final extrapolant and the best one of the previous
    order.
    """
    zs = np.asarray(zs, dtype=float)
    P = [np.array(v, dtype=complex) for v in values]
    n = len(P)
    if n < 2:
        return P[0], float("inf")
    prev_order = P
    for order in range(1, n):
        nxt = []
        for i in range(n - order):
            zi, zim = zs[i], zs[i + order]
            nxt.append(((0.0 - zi) * P[i + 1] - (0.0 - zim) * P[i]) / (zim - zi))
        prev_order = P
        P = nxt
    best = P[0]
    ref = prev_order[-1]
    resid = float(np.max(np.abs(best - ref)) /
                  max(float(np.max(np.abs(best))), 1e-300))
    return best, resid


def _z_sequence_limits(problem: DetEquivProblem, z_sequence) -> ZLimits:
    zs = sorted(z_sequence, key=abs, reverse=True)
    g_vals, h_vals = [], []
    eye = np.eye(problem.n_cells)
    warm = None
    for z in zs:
        G, t_hat, _ = _scaled_fixed_point(problem, z, init=warm)
        warm = G
        # scaled derivative: z^2 fbar solves the same linear structure with
        # the scaled self-energy and (G^T - zI)^-1 coefficients
        coeff_inv = np.linalg.inv(G.transpose(0, 2, 1) - z * eye)
        h = _derivative_solve(problem.rbar, np.linalg.inv(t_hat), coeff_inv,
                              problem.lam)
        g_vals.append(G)
        h_vals.append(h)
    f_tilde, res_f = _neville_to_zero(np.array(zs), g_vals)
    fbar_tilde, res_h = _neville_to_zero(np.array(zs), h_vals)
    residual = max(res_f, res_h)
    if residual > EXTRAPOLATION_WARN:
        warnings.warn(f"z-limit extrapolation residual {residual:.2e} exceeds "
                      f"{EXTRAPOLATION_WARN}", NumericWarning, stacklevel=3)
    return ZLimits(f_tilde=f_tilde, fbar_tilde=fbar_tilde, method="z-sequence",
                   extrapolation_residual=residual)


def take_z_limits(problem: DetEquivProblem,
                  z_sequence=DEFAULT_Z_SEQUENCE,
                  method: str = "direct",
                  cross_check: bool = False) -> ZLimits:
    """Limits of -z f and z^2 fbar as z -> 0-.

    ``method`` picks the direct limiting system ("direct", preferred; falls
    back to the z sequence if it fails) or the extrapolated z sequence
    ("z-sequence"). With ``cross_check`` both paths run and must agree to
    one part in a thousand.
    """
    if method not in ("direct", "z-sequence"):
        raise SpecError(f"unknown z-limit method {method!r}")
    direct: ZLimits | None = None
    if method == "direct":
        try:
            f_tilde, t_hat, _ = _scaled_fixed_point(problem)
            coeff_inv = np.linalg.inv(f_tilde.transpose(0, 2, 1))
            fbar_tilde = _derivative_solve(problem.rbar, np.linalg.inv(t_hat),
                                           coeff_inv, problem.lam)
            direct = ZLimits(f_tilde=f_tilde, fbar_tilde=fbar_tilde,
                             method="direct", t_hat=t_hat)
        except NumericError as exc:
            if not cross_check:
                warnings.warn(f"direct limit solve failed ({exc}); falling back "
                              "to the z sequence", NumericWarning, stacklevel=2)
            else:
                raise
    if direct is not None and not cross_check:
        return direct
    seq = _z_sequence_limits(problem, z_sequence)
    if direct is None:
        return seq
    scale = max(float(np.max(np.abs(direct.f_tilde))), 1e-300)
    gap_f = float(np.max(np.abs(direct.f_tilde - seq.f_tilde))) / scale
    scale_b = max(float(np.max(np.abs(direct.fbar_tilde))), 1e-300)
    gap_b = float(np.max(np.abs(direct.fbar_tilde - seq.fbar_tilde))) / scale_b
    gap = max(gap_f, gap_b)
    if gap > DUAL_PATH_TOL:
        raise NumericError(f"direct and z-sequence limits disagree by {gap:.2e}")
    return replace(direct, dual_path_gap=gap,
                   extrapolation_residual=seq.extrapolation_residual)


def _gamma_from_limits(f_tilde: np.ndarray, fbar_tilde: np.ndarray,
                       M: int) -> np.ndarray:
    """Gamma_k = Ftilde_k^-1 Fbar_tilde_k Ftilde_k^-1 / M, Hermitized."""
    K = f_tilde.shape[0]
    out = np.empty_like(fbar_tilde)
    for k in range(K):
        ft = f_tilde[k]
        if np.linalg.cond(ft) > FTILDE_CONDITION_LIMIT:
            raise SingularityError(
                "limit trace matrix is near singular; the antenna count is too "
                "close to the number of combined estimates or the covariances "
                "are colinear")
        inv = np.linalg.inv(ft)
        g = inv @ fbar_tilde[k] @ inv / M
        asym = np.linalg.norm(g - g.conj().T) / max(np.linalg.norm(g), 1e-300)
        if asym > GAMMA_ASYMMETRY_LIMIT:
            raise NumericError(f"gamma asymmetry {asym:.2e} exceeds tolerance")
        out[k] = 0.5 * (g + g.conj().T)
    return out


def gamma(problem: DetEquivProblem, limits: ZLimits | None = None,
          method: str = "direct") -> np.ndarray:
    """Residual interference kernels Gamma[k] (L x L) for this base station.

    The scaled-trace limits are combined per user and divided by the
    antenna count, matching the zero-forcing quadratic forms they
    approximate; the result is Hermitized, with asymmetry beyond roundoff
    treated as an error.
    """
    if limits is None:
        limits = take_z_limits(problem, method=method)
    return _gamma_from_limits(limits.f_tilde, limits.fbar_tilde,
                              problem.n_antennas)


def gamma_all_cells(cov: CovarianceSet, model: EstimationModel, data_powers,
                    method: str = "direct",
                    products_by_cell=None) -> np.ndarray:
    """Gamma[j, k] kernels for every base station, shape (L, K, L, L)."""
    L, K = cov.n_cells, cov.users_per_cell
    out = np.empty((L, K, L, L), dtype=complex)
    for j in range(L):
        products = products_by_cell[j] if products_by_cell is not None else None
        problem = build_det_equiv_problem(cov, model, data_powers, j,
                                          products=products)
        out[j] = gamma(problem, method=method)
    return out


class GammaRecomputer:
    """Fast Gamma updates when only the data powers change.

    The limiting fixed point and the perturbation operator depend on the
    covariances alone; a new power vector only moves the residual matrix
    lam, which enters through the right-hand side of one pre-assembled
    linear system per cell. Building this object costs one full solve;
    each subsequent ``gammas(q)`` call is a few small solves.
    """

    def __init__(self, cov: CovarianceSet, model: EstimationModel, data_powers,
                 products_by_cell=None):
        self.L = cov.n_cells
        self.K = cov.users_per_cell
        self.M = cov.n_antennas
        self._cells = []
        for j in range(self.L):
            products = products_by_cell[j] if products_by_cell is not None else None
            problem = build_det_equiv_problem(cov, model, data_powers, j,
                                              products=products)
            f_tilde, t_hat, _ = _scaled_fixed_point(problem)
            coeff_inv = np.linalg.inv(f_tilde.transpose(0, 2, 1))
            system, b_map = _derivative_operator(problem.rbar,
                                                 np.linalg.inv(t_hat), coeff_inv)
            self._cells.append({
                "f_tilde": f_tilde,
                "system": system,
                "b_map": b_map,
                "phi_err": problem._phi_err,
            })

    def gammas(self, data_powers) -> np.ndarray:
        """Gamma[j, k] kernels at the given data powers, shape (L, K, L, L)."""
        q = np.asarray(data_powers, dtype=float)
        K, L, M = self.K, self.L, self.M
        out = np.empty((L, K, L, L), dtype=complex)
        eye_flat = np.eye(M).reshape(-1)
        for j, cell in enumerate(self._cells):
            lam = np.einsum("kn,knab->ab", q, cell["phi_err"]).reshape(-1) + eye_flat
            b = cell["b_map"] @ lam / M
            x = np.linalg.solve(cell["system"], b)
            fbar_tilde = x.reshape(K, L, L).transpose(0, 2, 1)
            out[j] = _gamma_from_limits(cell["f_tilde"], fbar_tilde, M)
        return out


def sample_scaled_vectors(problem: DetEquivProblem,
                          rng: np.random.Generator) -> np.ndarray:
    """One draw of the scaled estimate family, shape (K, L, M).

    Vectors of the same user index are jointly Gaussian with the block
    cross-covariance rbar / M; different user indices are independent.
    """
    K, L, M = problem.users_per_cell, problem.n_cells, problem.n_antennas
    out = np.empty((K, L, M), dtype=complex)
    for k in range(K):
        big = problem.rbar[k].transpose(0, 2, 1, 3).reshape(L * M, L * M) / M
        vals, vecs = np.linalg.eigh(big)
        root = vecs * np.sqrt(np.maximum(vals, 0.0))
        w = (rng.standard_normal(L * M) + 1j * rng.standard_normal(L * M)) / np.sqrt(2)
        out[k] = (root @ w).reshape(L, M)
    return out


def sample_gram(problem: DetEquivProblem, rng: np.random.Generator):
    """A draw of (B, vectors) with B the Gram matrix of all scaled vectors."""
    vecs = sample_scaled_vectors(problem, rng)
    flat = vecs.reshape(-1, problem.n_antennas)
    B = flat.T @ flat.conj()
    return B, vecs
