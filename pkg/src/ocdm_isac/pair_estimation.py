"""Per-pair range/velocity estimation: model order, reduced-length 2D-ESPRIT
initialization and Barzilai-Borwein gradient refinement."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator

from .fmcw import MeasurementCube, _region_codes, breakpoint_mus, doppler_matrix, response_matrix
from .waveform import DssPlan, WaveformConfig


class BreakpointWarning(RuntimeWarning):
    """A normalized delay sits on a sample-region change point."""


class RankCollapseWarning(RuntimeWarning):
    pass


@dataclass
class PairEstimate:
    """Estimated paths of one (DSS, Rx) pair.

    Attributes:
        pair: (n, j).
        L_hat: Number of estimated paths.
        mu, nu: Normalized delay in [0, 1) and Doppler in [-0.5, 0.5).
        alpha: Complex amplitudes.
        objective_trace: Objective after the initialization and each
            refinement step.
        mu_ini, nu_ini: Reduced-length ESPRIT initialization.
    """

    pair: tuple
    L_hat: int
    mu: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    objective_trace: list = field(default_factory=list)
    mu_ini: Optional[np.ndarray] = None
    nu_ini: Optional[np.ndarray] = None
    flags: tuple = ()


def wrap_mu(mu):
    return np.mod(mu, 1.0)


def wrap_nu(nu):
    return np.mod(np.asarray(nu) + 0.5, 1.0) - 0.5


def _mdl_order(X, cap: int) -> int:
    """MDL order of the sample covariance X X^H / n with the columns of X as snapshots."""
    p, n_snap = X.shape
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    lam = np.zeros(p)
    lam[:s.size] = s ** 2 / n_snap
    lam = np.maximum(lam, lam[0] * 1e-10)
    best, best_k = np.inf, 0
    for k in range(min(cap, p - 1) + 1):
        tail = lam[k:]
        # log of geometric over arithmetic mean of the noise eigenvalues
        llr = np.mean(np.log(tail)) - np.log(np.mean(tail))
        mdl = -n_snap * (p - k) * llr + 0.5 * k * (2 * p - k) * np.log(n_snap)
        if mdl < best - 1e-12:
            best, best_k = mdl, k
    return int(best_k)


def estimate_path_count(Rbar, max_order: Optional[int] = None,
                        doppler_window: Optional[int] = None, delay_window: Optional[int] = None,
                        rows=None) -> int:
    """Minimum description length order estimate.

    Three MDL estimates are combined by taking the largest: the row
    covariance R R^H / M (the M chirps are snapshots), the covariance of
    length-W sliding windows along the chirp axis, and the covariance of
    sliding windows along the sample axis. The chirp-axis windows separate
    paths that share a beat frequency but differ in Doppler, where the row
    space loses rank; the sample-axis windows separate paths that share a
    Doppler but differ in delay, which are coherent across chirps.

    Args:
        Rbar: (Q, M) measurement matrix of one pair.
        max_order: Optional upper bound on the order.
        doppler_window: Window length W along the chirp axis, default M // 2.
            Pass 0 to skip this estimate.
        delay_window: Window length along the sample axis, default two
            thirds of the rows used. Pass 0 to skip this estimate.
        rows: Sample indices on which the beat is a single tone per path.
            The sample-axis estimate runs only when they are given, since a
            blank window breaks the tone model on the other samples.
    """
    R = np.asarray(Rbar, dtype=complex)
    if R.ndim != 2 or min(R.shape) < 2:
        raise ValueError("need a 2-D matrix with at least 2 rows and columns")
    p, m = R.shape
    cap = min(p, m) - 1 if max_order is None else min(max_order, min(p, m) - 1)
    order = _mdl_order(R, cap)
    W = m // 2 if doppler_window is None else doppler_window
    if W >= 2:
        # (p, m - W + 1, W) windows -> W x (p (m - W + 1)) snapshot matrix
        H = sliding_window_view(R, W, axis=1).reshape(-1, W).T
        order = max(order, _mdl_order(H, cap))
    if rows is None:
        return order
    Rr = R[np.asarray(rows)]
    Wd = int(np.ceil(2 * Rr.shape[0] / 3)) if delay_window is None else delay_window
    if 2 <= Wd < Rr.shape[0]:
        # (p - Wd + 1, m, Wd) windows -> Wd x ((p - Wd + 1) m) snapshot matrix
        H = sliding_window_view(Rr, Wd, axis=0).reshape(-1, Wd).T
        order = max(order, _mdl_order(H, min(cap, Wd - 1)))
    return order


def reduced_index_sets(k: int, cfg: WaveformConfig):
    """Sample sets that keep the Vandermonde structure for every delay.

    Returns zero-based index arrays (omega_I, omega_III, omega_ini): samples
    taken before the earliest possible blank window, samples after the
    latest possible blank window, and the larger of the two (ties go to the
    first set).
    """
    xq = (cfg.B * cfg.T_GI + np.arange(cfg.Q) * cfg.B / cfg.f_ADC) / cfg.K
    xa = k / cfg.K
    tol = 1e-9
    om1 = np.flatnonzero(xq < xa - tol)
    om3 = np.flatnonzero(xq >= xa + cfg.T_GI / cfg.T - tol)
    ini = om1 if om1.size >= om3.size else om3
    return om1, om3, ini


def esprit_2d(R_sub, L: int, sub_rows: Optional[int] = None, sub_cols: Optional[int] = None):
    """Paired 2-D ESPRIT on a block X[p, m] = sum_l c_l z_l^p w_l^m.

    Two-dimensional smoothing (row sub-block of 2P/3, up to 8 column
    shifts) builds a block-Hankel matrix whose dominant left singular
    vectors span the signal subspace. Shift invariance
    along rows and columns gives Psi_mu and Psi_nu; they share eigenvectors,
    so both are diagonalized by the eigenvectors of a generic combination,
    which pairs the two parameter sets automatically.

    Returns:
        (mu, nu) with z = exp(j 2 pi mu), w = exp(-j 2 pi nu); mu in [0, 1),
        nu in [-0.5, 0.5).
    """
    X = np.asarray(R_sub, dtype=complex)
    P, M = X.shape
    if L < 1:
        return np.zeros(0), np.zeros(0)
    if P <= L or M <= L:
        raise ValueError(f"block {P}x{M} too small for {L} paths")
    if L == 1 and sub_rows is None and sub_cols is None:
        P1, M1 = P, M
    else:
        P1 = sub_rows or max(int(np.ceil(2 * P / 3)), L + 1)
        # few column shifts keep the Hankel matrix narrow and the SVD cheap
        M1 = sub_cols or max(M - min(7, M // 2), L + 1)
        P1, M1 = min(P1, P), min(M1, M)
    win = np.lib.stride_tricks.sliding_window_view(X, (P1, M1))
    H = win.reshape(-1, P1 * M1).T  # rows indexed p * M1 + m
    U, s, _ = np.linalg.svd(H, full_matrices=False)
    if s.size < L:
        raise ValueError("not enough smoothing blocks for the requested order")
    if s[L - 1] <= 1e-12 * s[0]:
        warnings.warn("signal subspace rank below the requested order", RankCollapseWarning)
    Us = U[:, :L].reshape(P1, M1, L)
    u1, u2 = Us[:-1].reshape(-1, L), Us[1:].reshape(-1, L)
    v1, v2 = Us[:, :-1].reshape(-1, L), Us[:, 1:].reshape(-1, L)
    psi_p = np.linalg.lstsq(u1, u2, rcond=None)[0]
    psi_m = np.linalg.lstsq(v1, v2, rcond=None)[0]
    _, T = np.linalg.eig(psi_p + 0.6180339887 * psi_m)
    Ti = np.linalg.pinv(T)
    z = np.diag(Ti @ psi_p @ T)
    w = np.diag(Ti @ psi_m @ T)
    mu = wrap_mu(np.angle(z) / (2 * np.pi))
    nu = wrap_nu(-np.angle(w) / (2 * np.pi))
    return mu, nu


def pair_basis(mu, nu, k: int, cfg: WaveformConfig, M: Optional[int] = None) -> np.ndarray:
    """Khatri-Rao matrix with columns kron(conj(a(nu_l)), b(mu_l)), shape (Q M, L)."""
    M = cfg.M if M is None else M
    B = response_matrix(k, mu, cfg)
    A = doppler_matrix(nu, M).conj()
    return (A[:, None, :] * B[None, :, :]).reshape(-1, B.shape[1])


def _vec(R):
    return np.asarray(R, dtype=complex).reshape(-1, order="F")


def ls_amplitudes(mu, nu, rbar, k: int, cfg: WaveformConfig, M: Optional[int] = None):
    """Least-squares path amplitudes for fixed (mu, nu)."""
    mu = np.atleast_1d(mu)
    if mu.size == 0:
        return np.zeros(0, dtype=complex)
    C = pair_basis(mu, nu, k, cfg, M)
    r = np.asarray(rbar, dtype=complex).reshape(-1)
    alpha, _, rank, sv = np.linalg.lstsq(C, r, rcond=None)
    if rank < C.shape[1]:
        raise np.linalg.LinAlgError("basis is rank deficient (duplicate parameters)")
    return alpha


def objective(mu, nu, alpha, rbar, k: int, cfg: WaveformConfig, M: Optional[int] = None) -> float:
    """Squared residual norm of the path model."""
    r = np.asarray(rbar, dtype=complex).reshape(-1)
    if np.size(mu) == 0:
        return float(np.vdot(r, r).real)
    e = pair_basis(mu, nu, k, cfg, M) @ np.asarray(alpha) - r
    return float(np.vdot(e, e).real)


def _near_breakpoint(mu, k, cfg, tol=1e-6):
    bp = breakpoint_mus(k, cfg)
    if bp.size == 0:
        return False
    mu = np.atleast_1d(mu)
    return bool(np.any(np.min(np.abs(mu[:, None] - bp[None, :]), axis=1) < tol))


def model_jacobian(mu, nu, alpha, k: int, cfg: WaveformConfig, M: Optional[int] = None):
    """Basis C and the derivative of C alpha w.r.t. (mu, nu), shape (Q M, 2 L).

    Region membership of the samples is treated as locally constant.
    """
    M = cfg.M if M is None else M
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
    L = mu.size
    B = response_matrix(k, mu, cfg)
    A = doppler_matrix(nu, M).conj()
    code = _region_codes(k, mu, cfg)
    q = np.arange(cfg.Q)[:, None]
    phi = 2 * np.pi * cfg.f_ADC * cfg.T
    dB = 1j * (2 * np.pi * q - np.where(code == 2, phi, 0.0)) * B
    dA = -2j * np.pi * np.arange(M)[:, None] * A
    C = (A[:, None, :] * B[None, :, :]).reshape(-1, L)
    Jm = (A[:, None, :] * dB[None, :, :]).reshape(-1, L) * alpha
    Jn = (dA[:, None, :] * B[None, :, :]).reshape(-1, L) * alpha
    return C, np.hstack([Jm, Jn])


def gradient(mu, nu, alpha, rbar, k: int, cfg: WaveformConfig, M: Optional[int] = None,
             check_breakpoints: bool = True):
    """Analytic gradient of the objective w.r.t. mu and nu at fixed alpha.

    Region membership of the samples is treated as locally constant, so the
    gradient is undefined exactly at a breakpoint; proximity raises a
    BreakpointWarning.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.size == 0:
        return np.zeros(0), np.zeros(0)
    if check_breakpoints and _near_breakpoint(mu, k, cfg):
        warnings.warn("mu within 1e-6 of a sample-region breakpoint", BreakpointWarning)
    C, J = model_jacobian(mu, nu, alpha, k, cfg, M)
    e = C @ np.atleast_1d(alpha) - np.asarray(rbar, dtype=complex).reshape(-1)
    g = 2 * np.real(J.conj().T @ e)
    return g[:mu.size], g[mu.size:]


def bb_step(s, y, gamma_min: float = 1e-12, gamma_max: float = 1e12) -> float:
    """Barzilai-Borwein step s^T y / y^T y, clamped; gamma_min when s^T y <= 0."""
    s = np.ravel(s)
    y = np.ravel(y)
    yy = float(np.dot(y, y))
    sy = float(np.dot(s, y))
    if yy <= 0 or not np.isfinite(yy) or sy <= 0:
        return gamma_min
    return float(np.clip(sy / yy, gamma_min, gamma_max))


def _esprit_init(Rbar, k, cfg, L, reduce=True):
    if reduce:
        rows = reduced_index_sets(k, cfg)[2]
        return esprit_2d(Rbar[rows], L)
    return esprit_2d(Rbar, L)


def curvature_diag(mu, nu, alpha, k: int, cfg: WaveformConfig, M: Optional[int] = None):
    """Diagonal of the Gauss-Newton Hessian of the objective w.r.t. (mu, nu)."""
    _, J = model_jacobian(mu, nu, alpha, k, cfg, M)
    return 2 * np.sum(np.abs(J) ** 2, axis=0)


def projected_gauss_newton(mu, nu, alpha, k: int, cfg: WaveformConfig, M: Optional[int] = None):
    """Gauss-Newton matrix of the amplitude-eliminated objective.

    The Jacobian is projected onto the orthogonal complement of the basis
    columns, which accounts for the amplitude re-solve after every step.
    """
    C, J = model_jacobian(mu, nu, alpha, k, cfg, M)
    Jp = J - C @ np.linalg.lstsq(C, J, rcond=None)[0]
    return 2 * np.real(Jp.conj().T @ Jp)


PRECONDITIONERS = ("none", "diag", "gn")
_CLAMPS = {"none": (1e-8, 1e-2), "diag": (1e-3, 1e1), "gn": (1e-3, 1e1)}


def _split_restarts(best, trace, refine, L, k, cfg, gate_db=20.0):
    """Re-split path pairs that look merged and keep any restart that lowers the objective.

    Two situations trigger restarts. The weakest path is within gate_db of
    the residual noise floor (integrated over the pair) or gate_db below the
    strongest path: it is likely fitting noise or the leftover of two merged
    paths, so it is moved next to each other path. Two paths are closer than
    a quarter resolution cell in both delay and Doppler: the pair is re-split
    about its midpoint. Each split is tried in four diagonal directions, half a
    resolution cell apart.
    """
    g0, x0, a0 = best
    cand = []
    w = int(np.argmin(np.abs(a0)))
    s2 = g0 / max(cfg.Q * cfg.M - 3 * L, 1)
    energy = abs(a0[w]) ** 2 * np.sum(np.abs(pair_basis(x0[w:w + 1], x0[L + w:L + w + 1], k, cfg)) ** 2)
    gate = 10 ** (gate_db / 10)
    if energy <= s2 * gate or abs(a0[w]) ** 2 * gate <= np.max(np.abs(a0)) ** 2:
        cand += [(p, w, x0[p], x0[L + p]) for p in range(L) if p != w]
    for p in range(L):
        for q in range(p + 1, L):
            if abs(x0[p] - x0[q]) < 0.25 / cfg.Q and abs(x0[L + p] - x0[L + q]) < 0.25 / cfg.M:
                cand.append((p, q, (x0[p] + x0[q]) / 2, (x0[L + p] + x0[L + q]) / 2))
    dmu, dnu = 0.25 / cfg.Q, 0.25 / cfg.M
    for p, q, mc, nc in cand:
        for smu, snu in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            x = x0.copy()
            x[p], x[L + p] = mc - smu * dmu, nc - snu * dnu
            x[q], x[L + q] = mc + smu * dmu, nc + snu * dnu
            g, xb, ab, tr = refine(x)
            # the restart must beat the incumbent by more than rounding
            if g < best[0] * (1 - 1e-9):
                best, trace = [g, xb, ab], trace + tr
    return best, trace


def estimate_pair(Rbar, n: int, j: int, cfg: WaveformConfig, plan: DssPlan, H_max: int = 30,
                  L_hat: Optional[int] = None, gamma_min: Optional[float] = None,
                  gamma_max: Optional[float] = None, reduce: bool = True,
                  precondition: str = "gn", split: bool = True) -> PairEstimate:
    """Estimate the paths of one pair: order, RL-ESPRIT init, BB gradient refinement.

    Args:
        Rbar: Q x M measurement matrix of the pair.
        n, j: DSS and Rx index of the pair.
        H_max: Number of gradient iterations.
        L_hat: Fixed order; estimated by MDL when None.
        gamma_min, gamma_max: BB step clamps. Without preconditioning they
            apply to the objective normalized by the measurement energy
            (default 1e-8, 1e-2); with it they are relative to a Gauss-Newton
            step (default 1e-3, 10).
        reduce: Use the reduced-length sample block for ESPRIT. False runs
            ESPRIT on the full matrix (the blank window breaks its model).
        precondition: Metric applied to the gradient before the BB step:
            "none" (plain gradient), "diag" (inverse diagonal Gauss-Newton
            curvature) or "gn" (inverse projected Gauss-Newton matrix).
            Closely spaced paths of unequal strength make the plain gradient
            badly conditioned.
        split: After refinement, also try moving the weakest path next to
            each other path and refining again when that path is close to
            the noise floor; a restart is kept only when it lowers the
            objective. Recovers pairs of paths closer than one
            resolution cell, which ESPRIT merges into one.
    """
    if precondition not in PRECONDITIONERS:
        raise ValueError(f"precondition must be one of {PRECONDITIONERS}")
    dmin, dmax = _CLAMPS[precondition]
    gamma_min = dmin if gamma_min is None else gamma_min
    gamma_max = dmax if gamma_max is None else gamma_max
    R = np.asarray(Rbar, dtype=complex)
    k = plan.dss[n]
    rows = reduced_index_sets(k, cfg)[2]
    cap = min(rows.size, cfg.M) - 1
    if L_hat is None:
        L_hat = min(estimate_path_count(R, rows=rows), cap)
    empty = np.zeros(0)
    if L_hat == 0:
        r = _vec(R)
        return PairEstimate((n, j), 0, empty, empty, empty.astype(complex),
                            [float(np.vdot(r, r).real)], empty, empty)
    mu0, nu0 = _esprit_init(R, k, cfg, L_hat, reduce)
    r = _vec(R)
    scale = max(float(np.vdot(r, r).real), 1e-300)
    flags = []
    L = L_hat

    def evaluate(x, alpha=None):
        """Objective, amplitudes and preconditioned gradient at x."""
        C, J = model_jacobian(x[:L], x[L:], np.ones(L), k, cfg)
        Qc, Rc = np.linalg.qr(C)
        if alpha is None:
            d = np.abs(np.diag(Rc))
            if d.min() <= 1e-12 * max(d.max(), 1e-300):
                alpha = np.linalg.pinv(C) @ r
                if "rank_deficient" not in flags:
                    flags.append("rank_deficient")
            else:
                alpha = np.linalg.solve(Rc, Qc.conj().T @ r)
        e = C @ alpha - r
        g = float(np.vdot(e, e).real)
        J = J * np.concatenate([alpha, alpha])
        gr = 2 * np.real(J.conj().T @ e)
        if precondition == "none":
            return g, alpha, gr / scale
        if precondition == "diag":
            d = 2 * np.sum(np.abs(J) ** 2, axis=0)
            return g, alpha, gr / np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        Jp = J - Qc @ (Qc.conj().T @ J)
        H = 2 * np.real(Jp.conj().T @ Jp)
        H += 1e-10 * max(np.trace(H), 1e-300) / (2 * L) * np.eye(2 * L)
        return g, alpha, np.linalg.solve(H, gr)

    def refine(x):
        """BB-preconditioned descent from x; returns the best (objective, x, alpha, trace)."""
        g, alpha, dx = evaluate(x)
        trace = [g]
        best = (g, x.copy(), alpha)
        if H_max > 0 and np.any(dx):
            # probe a tiny step at fixed amplitudes to seed the first BB step
            xp = x - gamma_min * dx
            gamma = bb_step(xp - x, evaluate(xp, alpha)[2] - dx, gamma_min, gamma_max)
        for _ in range(H_max):
            if not np.any(dx):
                trace.append(g)
                continue
            xn = x - gamma * dx
            g, alpha, dn = evaluate(xn)
            trace.append(g)
            if g < best[0]:
                best = (g, xn.copy(), alpha)
            if not np.all(np.isfinite(dn)):
                break
            gamma = bb_step(xn - x, dn - dx, gamma_min, gamma_max)
            x, dx = xn, dn
        return best + (trace,)

    *best, trace = refine(np.concatenate([mu0, nu0]))
    if split and L >= 2:
        best, trace = _split_restarts(best, trace, refine, L, k, cfg)
    g_best, xb, ab = best
    if _near_breakpoint(xb[:L], k, cfg):
        flags.append("near_breakpoint")
    return PairEstimate((n, j), L, wrap_mu(xb[:L]), wrap_nu(xb[L:]), ab,
                        trace, mu0, nu0, tuple(flags))


class PairParameterEstimator(BaseEstimator):
    """Estimator wrapper running estimate_pair over every pair of a cube.

    Parameters:
        H_max: Gradient iterations per pair.
        gamma_min, gamma_max: BB clamps.
        fixed_order: Use this order for every pair instead of MDL.

    Attributes:
        estimates_: List of PairEstimate, ordered n-major then j.
    """

    def __init__(self, H_max: int = 30, gamma_min: Optional[float] = None,
                 gamma_max: Optional[float] = None, fixed_order: Optional[int] = None,
                 precondition: str = "gn"):
        self.H_max = H_max
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.fixed_order = fixed_order
        self.precondition = precondition

    def fit(self, X: MeasurementCube, y=None):
        if not isinstance(X, MeasurementCube):
            raise TypeError("expected a MeasurementCube")
        if self.H_max < 0:
            raise ValueError("H_max must be non-negative")
        N, J = X.data.shape[:2]
        self.estimates_ = [
            estimate_pair(X.data[n, j], n, j, X.cfg, X.plan, self.H_max, self.fixed_order,
                          self.gamma_min, self.gamma_max, precondition=self.precondition)
            for n in range(N) for j in range(J)]
        self.n_pairs_ = len(self.estimates_)
        return self

    def predict(self, X: MeasurementCube):
        return self.fit(X).estimates_


def write_pair_csv(estimates: Sequence[PairEstimate], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "j", "path", "mu", "nu", "alpha_re", "alpha_im"])
        for e in estimates:
            for l in range(e.L_hat):
                w.writerow([e.pair[0], e.pair[1], l, repr(float(e.mu[l])), repr(float(e.nu[l])),
                            repr(float(e.alpha[l].real)), repr(float(e.alpha[l].imag))])
