"""Performance metrics and numeric Cramer-Rao bounds."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fmcw import doppler_matrix, response_matrix
from .waveform import DssPlan, WaveformConfig

DB_FLOOR = -120.0


class SingularFisherWarning(RuntimeWarning):
    pass


def to_db(x, floor: Optional[float] = None):
    """10 log10 of an energy ratio, optionally clamped from below."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        v = 10 * np.log10(x)
    if floor is not None:
        v = np.maximum(v, floor)
    return v


def from_db(v):
    return 10 ** (np.asarray(v, dtype=float) / 10)


@dataclass(frozen=True)
class MetricReport:
    """Monte-Carlo metric summary.

    Attributes:
        name: Metric name.
        value: Mean over trials (linear).
        trials: Number of trials.
        ci_half_width: Half width of a normal 95% confidence interval.
    """

    name: str
    value: float
    trials: int
    ci_half_width: float

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")

    @property
    def value_db(self) -> float:
        return float(to_db(self.value, DB_FLOOR))

    @classmethod
    def from_samples(cls, name: str, samples) -> "MetricReport":
        x = np.asarray(samples, dtype=float).ravel()
        hw = 1.96 * x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else 0.0
        return cls(name, float(x.mean()), int(x.size), float(hw))


def match_paths(est_mu, est_nu, mu, nu):
    """Minimum-cost assignment of estimated to true paths on joint (mu, nu) error.

    Returns (est_idx, true_idx) of the matched pairs.
    """
    est_mu, est_nu = np.atleast_1d(est_mu), np.atleast_1d(est_nu)
    mu, nu = np.atleast_1d(mu), np.atleast_1d(nu)
    if est_mu.size == 0 or mu.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    dm = _wrapped(est_mu[:, None] - mu[None, :], 1.0)
    dn = _wrapped(est_nu[:, None] - nu[None, :], 1.0)
    return linear_sum_assignment(dm ** 2 + dn ** 2)


def _wrapped(d, period):
    return np.mod(d + period / 2, period) - period / 2


def pair_squared_errors(est_mu, est_nu, mu, nu):
    """Summed squared (mu, nu) errors of one pair plus the count of missed paths.

    Unmatched true paths contribute their own squared value.
    """
    mu, nu = np.atleast_1d(mu), np.atleast_1d(nu)
    r, c = match_paths(est_mu, est_nu, mu, nu)
    em = np.sum(_wrapped(np.atleast_1d(est_mu)[r] - mu[c], 1.0) ** 2)
    en = np.sum(_wrapped(np.atleast_1d(est_nu)[r] - nu[c], 1.0) ** 2)
    missed = np.setdiff1d(np.arange(mu.size), c)
    em += np.sum(mu[missed] ** 2)
    en += np.sum(nu[missed] ** 2)
    return float(em), float(en), int(missed.size)


def tmse(estimates, truths, kind: str = "mu") -> float:
    """Total squared error over pairs, averaged over trials.

    Args:
        estimates: Per trial, a sequence over pairs of (mu_hat, nu_hat).
        truths: Per trial, a sequence over pairs of (mu, nu).
        kind: "mu" or "nu".
    """
    if kind not in ("mu", "nu"):
        raise ValueError("kind must be 'mu' or 'nu'")
    idx = 0 if kind == "mu" else 1
    per_trial = []
    for est_t, tru_t in zip(estimates, truths):
        s = 0.0
        for (em, en), (m, n) in zip(est_t, tru_t):
            s += pair_squared_errors(em, en, m, n)[idx]
        per_trial.append(s)
    if not per_trial:
        raise ValueError("no trials")
    return float(np.mean(per_trial))


def pair_fisher(mu, nu, alpha, k: int, cfg: WaveformConfig, noise_var: float,
                step: float = 1e-7) -> np.ndarray:
    """Fisher information over (mu, nu, Re alpha, Im alpha) of one pair.

    The Jacobian of the vectorized noiseless signal uses central differences
    for mu and nu and exact columns for the amplitudes.
    """
    mu, nu = np.atleast_1d(mu).astype(float), np.atleast_1d(nu).astype(float)
    alpha = np.atleast_1d(alpha).astype(complex)
    M = cfg.M

    def col(m, n):
        return (doppler_matrix(n, M).conj()[:, None, :]
                * response_matrix(k, m, cfg)[None, :, :]).reshape(-1, np.size(m))

    C = col(mu, nu)
    dmu = (col(mu + step, nu) - col(mu - step, nu)) / (2 * step) * alpha
    dnu = (col(mu, nu + step) - col(mu, nu - step)) / (2 * step) * alpha
    J = np.hstack([dmu, dnu, C, 1j * C])
    return (2.0 / noise_var) * np.real(J.conj().T @ J)


def pair_crb(mu, nu, alpha, k: int, cfg: WaveformConfig, noise_var: float):
    """(CRB_mu, CRB_nu) of one pair: traces of the mu and nu blocks of FIM^-1.

    Returns (inf, inf) with a SingularFisherWarning when the FIM is singular.
    """
    L = np.size(mu)
    if L == 0:
        return 0.0, 0.0
    F = pair_fisher(mu, nu, alpha, k, cfg, noise_var)
    try:
        cond = np.linalg.cond(F)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        Fi = np.linalg.inv(F)
    except np.linalg.LinAlgError:
        warnings.warn("singular Fisher information", SingularFisherWarning)
        return np.inf, np.inf
    d = np.diag(Fi)
    return float(d[:L].sum()), float(d[L:2 * L].sum())


def tcrb(mu, nu, alpha, noise_var: float, cfg: WaveformConfig, plan: DssPlan):
    """Total CRBs summed over all (n, j) pairs.

    Args:
        mu, nu, alpha: Arrays of shape (N, N_Rx, L); paths with zero
            amplitude are excluded.
    """
    tm = tn = 0.0
    N, J = np.shape(mu)[:2]
    for n in range(N):
        for j in range(J):
            keep = np.abs(alpha[n, j]) > 0
            cm, cn = pair_crb(mu[n, j][keep], nu[n, j][keep], alpha[n, j][keep],
                              plan.dss[n], cfg, noise_var)
            tm += cm
            tn += cn
    return tm, tn


def _assignment_errors(est, truth, miss_penalty: bool):
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if est.shape[0] == 0 or truth.shape[0] == 0:
        return np.zeros(0, int), np.zeros(0, int)
    cost = np.sum((est[:, None, :] - truth[None, :, :]) ** 2, axis=-1)
    return linear_sum_assignment(cost)


def target_squared_errors(est_pos, est_vel, true_pos, true_vel):
    """Summed squared position and velocity errors of one trial.

    Estimates are matched to truths by minimum squared position error; a
    missed target costs its squared position / velocity magnitude.

    Returns:
        (pos_se, vel_se, n_missed)
    """
    est_pos = np.asarray(est_pos, dtype=float).reshape(-1, 3)
    est_vel = np.asarray(est_vel, dtype=float).reshape(-1, 3)
    true_pos = np.asarray(true_pos, dtype=float).reshape(-1, 3)
    true_vel = np.asarray(true_vel, dtype=float).reshape(-1, 3)
    r, c = _assignment_errors(est_pos, true_pos, True)
    pe = float(np.sum((est_pos[r] - true_pos[c]) ** 2))
    ve = float(np.sum((est_vel[r] - true_vel[c]) ** 2))
    missed = np.setdiff1d(np.arange(true_pos.shape[0]), c)
    pe += float(np.sum(true_pos[missed] ** 2))
    ve += float(np.sum(true_vel[missed] ** 2))
    return pe, ve, int(missed.size)


def mse_targets(estimates, truths):
    """Position and velocity MSE in dB (floor -120 dB) over trials.

    Args:
        estimates: Per trial, (positions (L_hat, 3), velocities (L_hat, 3)).
        truths: Per trial, (positions (L, 3), velocities (L, 3)).

    Returns:
        (mse_pos_db, mse_vel_db, missed_total)
    """
    pe, ve, miss = [], [], 0
    for (ep, ev), (tp, tv) in zip(estimates, truths):
        a, b, m = target_squared_errors(ep, ev, tp, tv)
        pe.append(a)
        ve.append(b)
        miss += m
    if not pe:
        raise ValueError("no trials")
    return float(to_db(np.mean(pe), DB_FLOOR)), float(to_db(np.mean(ve), DB_FLOOR)), miss


def nmse_trial(h_est, h_true) -> float:
    """Normalized squared error of one channel realization."""
    h_est = np.asarray(h_est)
    h_true = np.asarray(h_true)
    den = float(np.sum(np.abs(h_true) ** 2))
    if den == 0:
        raise ValueError("true channel has zero energy")
    return float(np.sum(np.abs(h_est - h_true) ** 2)) / den


def nmse(estimates, truths) -> float:
    """Mean normalized channel error over trials (linear).

    Accepts a single (estimate, truth) pair of arrays or sequences of them.
    """
    if isinstance(estimates, np.ndarray) and isinstance(truths, np.ndarray) \
            and estimates.shape == truths.shape and estimates.ndim == 2:
        return nmse_trial(estimates, truths)
    vals = [nmse_trial(e, t) for e, t in zip(estimates, truths)]
    if not vals:
        raise ValueError("no trials")
    return float(np.mean(vals))
