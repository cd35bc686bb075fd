"""Virtual bistatic sensing: fuse per-pair range/Doppler estimates into 3-D targets."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans
from sklearn.neighbors import LocalOutlierFactor

from .pair_estimation import PairEstimate, bb_step
from .scene import ArrayGeometry
from .waveform import SPEED_OF_LIGHT, DssPlan, WaveformConfig

_PERTURB = 1e-9


def range_scale(cfg: WaveformConfig) -> float:
    """Metres of bistatic range per unit of normalized delay."""
    return SPEED_OF_LIGHT * cfg.f_ADC * cfg.T / cfg.B


def velocity_scale(cfg: WaveformConfig) -> float:
    """Metres per second of bistatic range rate per unit of normalized Doppler."""
    return cfg.wavelength / cfg.symbol_period


def to_physical(mu, nu, cfg: WaveformConfig):
    """Normalized (mu, nu) to bistatic range [m] and range rate [m/s]."""
    return np.asarray(mu, dtype=float) * range_scale(cfg), np.asarray(nu, dtype=float) * velocity_scale(cfg)


def from_physical(d, v, cfg: WaveformConfig):
    return np.asarray(d, dtype=float) / range_scale(cfg), np.asarray(v, dtype=float) / velocity_scale(cfg)


@dataclass(frozen=True)
class BistaticMeasurements:
    """A set of bistatic measurements stored column-wise.

    Attributes:
        d: (P,) bistatic ranges [m].
        v: (P,) bistatic range rates [m/s].
        tx_pos, rx_pos: (P, 3) positions of the originating DSA and Rx antenna.
        tx_idx, rx_idx: (P,) DSS (n) and Rx (j) indices of each measurement.
    """

    d: np.ndarray
    v: np.ndarray
    tx_pos: np.ndarray
    rx_pos: np.ndarray
    tx_idx: np.ndarray
    rx_idx: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).reshape(-1)
        P = d.size
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(P))
        object.__setattr__(self, "tx_pos", np.asarray(self.tx_pos, dtype=float).reshape(P, 3))
        object.__setattr__(self, "rx_pos", np.asarray(self.rx_pos, dtype=float).reshape(P, 3))
        object.__setattr__(self, "tx_idx", np.asarray(self.tx_idx, dtype=int).reshape(P))
        object.__setattr__(self, "rx_idx", np.asarray(self.rx_idx, dtype=int).reshape(P))
        if np.any(d < 0):
            raise ValueError("bistatic ranges must be non-negative")

    def __len__(self):
        return self.d.size

    def subset(self, idx) -> "BistaticMeasurements":
        idx = np.asarray(idx)
        return BistaticMeasurements(self.d[idx], self.v[idx], self.tx_pos[idx], self.rx_pos[idx],
                                    self.tx_idx[idx], self.rx_idx[idx])

    @classmethod
    def from_estimates(cls, estimates: Sequence[PairEstimate], geometry: ArrayGeometry,
                       plan: DssPlan, cfg: WaveformConfig) -> "BistaticMeasurements":
        """Collect every estimated path of every pair as one measurement."""
        d, v, n_idx, j_idx = [], [], [], []
        for e in estimates:
            n, j = e.pair
            dd, vv = to_physical(e.mu, e.nu, cfg)
            d.extend(np.atleast_1d(dd))
            v.extend(np.atleast_1d(vv))
            n_idx.extend([n] * np.size(e.mu))
            j_idx.extend([j] * np.size(e.mu))
        n_idx = np.asarray(n_idx, dtype=int)
        j_idx = np.asarray(j_idx, dtype=int)
        dsa = np.asarray(plan.dsa, dtype=int)
        tx = geometry.tx_positions[dsa[n_idx]] if n_idx.size else np.zeros((0, 3))
        rx = geometry.rx_positions[j_idx] if j_idx.size else np.zeros((0, 3))
        return cls(np.asarray(d), np.asarray(v), tx, rx, n_idx, j_idx)


@dataclass(frozen=True)
class Cluster:
    """Indices into a BistaticMeasurements set assigned to one target."""

    members: np.ndarray
    label: int = 0

    def __post_init__(self):
        m = np.asarray(self.members, dtype=int).reshape(-1)
        if m.size < 1:
            raise ValueError("a cluster needs at least one member")
        object.__setattr__(self, "members", m)

    @property
    def P(self) -> int:
        return self.members.size


@dataclass
class TargetEstimate:
    position: np.ndarray
    velocity: np.ndarray
    cluster: int
    flags: tuple = ()
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.position[2] <= 0:
            raise ValueError("target estimates must have z > 0")


def _mad(x):
    x = np.asarray(x, dtype=float)
    return float(np.median(np.abs(x - np.median(x))))


def standardize(meas: BistaticMeasurements) -> np.ndarray:
    """(P, 2) points with ranges and range rates divided by their MAD.

    A zero MAD falls back to the standard deviation, then to 1.
    """
    cols = []
    for x in (meas.d, meas.v):
        s = _mad(x)
        if s <= 0:
            s = float(np.std(x))
        cols.append(x / (s if s > 0 else 1.0))
    return np.stack(cols, axis=1) if len(meas) else np.zeros((0, 2))


def eliminate_outliers(meas: BistaticMeasurements, mad_threshold: float = 3.5,
                       n_neighbors: int = 3, min_distance: float = 1.0, min_ratio: float = 3.0):
    """Drop isolated points in the standardized (d, v) plane.

    The score of a point is its local outlier factor: the local density of
    its n_neighbors nearest neighbours over its own, so a target whose
    measurements are spread out (a wide array seen from close range) is not
    mistaken for a set of outliers next to a compact target. A point is
    removed when the robust z-score of that score exceeds mad_threshold, its
    distance to the n_neighbors-th neighbour exceeds min_distance (in MAD
    units) and the score is at least min_ratio. The last guard keeps
    near-uniform sets, whose score MAD is close to zero, intact. At most half
    of the points are removed, the most isolated first.

    Returns:
        (filtered measurements, kept indices)
    """
    P = len(meas)
    keep = np.arange(P)
    if P < 3:
        return meas, keep
    X = standardize(meas)
    k = min(n_neighbors, P - 1)
    with warnings.catch_warnings():
        # coincident points are legitimate here (noiseless or repeated paths)
        warnings.filterwarnings("ignore", message="Duplicate values")
        lof = LocalOutlierFactor(n_neighbors=k).fit(X)
    score = -lof.negative_outlier_factor_
    kdist = lof.kneighbors(X, k + 1)[0][:, k]
    med = np.median(score)
    mad = _mad(score)
    if mad <= 0:
        z = np.where(score > med, np.inf, 0.0)
    else:
        z = (score - med) / (1.4826 * mad)
    bad = np.flatnonzero((z > mad_threshold) & (kdist > min_distance) & (score >= min_ratio))
    bad = bad[np.argsort(-score[bad], kind="stable")][:P // 2]
    keep = np.setdiff1d(keep, bad)
    return meas.subset(keep), keep


def cluster_measurements(meas: BistaticMeasurements, L_hat: int, seed=None, n_init: int = 20,
                         weights=(1.0, 1.0)):
    """K-means (k-means++, n_init restarts) on MAD-standardized (d, v).

    weights scales the two standardized coordinates before clustering.

    Returns:
        List of L_hat Clusters (possibly fewer when K-means leaves one empty).
    """
    P = len(meas)
    if L_hat < 1:
        raise ValueError("L_hat must be >= 1")
    if P < L_hat:
        raise ValueError(f"{P} measurements cannot form {L_hat} clusters")
    if L_hat == 1:
        return [Cluster(np.arange(P), 0)]
    X = standardize(meas) * np.asarray(weights, dtype=float)
    rs = seed if seed is None or isinstance(seed, (int, np.integer)) else \
        int(np.random.default_rng(seed).integers(2 ** 31))
    km = KMeans(n_clusters=L_hat, n_init=n_init, random_state=rs).fit(X)
    return [Cluster(np.flatnonzero(km.labels_ == c), c) for c in range(L_hat)
            if np.any(km.labels_ == c)]


def closed_form_position(meas: BistaticMeasurements, common: str = "tx", return_flags: bool = False):
    """Closed-form position from >= 3 measurements sharing one DSA (or one Rx).

    Squaring d_p - |p - a| = |p - b_p|, with a the shared antenna and b_p the
    other one, gives the linear system w_p^T theta = c_p in
    theta = (x, y, |p - a|), where w_p = 2 (a - b_p)_xy, 2 d_p and
    c_p = d_p^2 + |a|^2 - |b_p|^2. The height follows from |p - a|, taking
    the positive root.

    Args:
        meas: Measurements sharing the antenna selected by common.
        common: "tx" (shared DSA) or "rx" (shared Rx antenna).
        return_flags: Also return a tuple of flags.

    Raises:
        ValueError: Fewer than 3 measurements, mixed shared antennas, or a
            system of rank < 3.
    """
    if common not in ("tx", "rx"):
        raise ValueError("common must be 'tx' or 'rx'")
    if len(meas) < 3:
        raise ValueError("need at least 3 measurements")
    shared, other = (meas.tx_pos, meas.rx_pos) if common == "tx" else (meas.rx_pos, meas.tx_pos)
    if np.ptp(shared, axis=0).max() > 0:
        raise ValueError(f"measurements do not share one {common} antenna")
    a = shared[0]
    dlt = a[None, :2] - other[:, :2]
    W = 2 * np.column_stack([dlt, meas.d])
    c = meas.d ** 2 + a @ a - np.sum(other ** 2, axis=1)
    if np.linalg.matrix_rank(W, tol=1e-9 * max(np.abs(W).max(), 1e-300)) < 3:
        raise ValueError("rank-deficient antenna geometry (collinear antennas)")
    theta = np.linalg.lstsq(W, c, rcond=None)[0]
    rad = theta[2] ** 2 - (theta[0] - a[0]) ** 2 - (theta[1] - a[1]) ** 2
    flags = ()
    if rad < 0:
        flags = ("negative_radicand",)
        rad = 0.0
    p = np.array([theta[0], theta[1], np.sqrt(rad)])
    return (p, flags) if return_flags else p


def _ranges(p, tx, rx):
    rt = p - tx
    rr = p - rx
    nt = np.linalg.norm(rt, axis=1)
    nr = np.linalg.norm(rr, axis=1)
    return rt, rr, nt, nr


def position_objective(p, meas: BistaticMeasurements) -> float:
    """Sum of squared bistatic range residuals."""
    _, _, nt, nr = _ranges(np.asarray(p, dtype=float), meas.tx_pos, meas.rx_pos)
    e = meas.d - nt - nr
    return float(e @ e)


def _direction_matrix(p, tx, rx):
    rt, rr, nt, nr = _ranges(p, tx, rx)
    return rt / nt[:, None] + rr / nr[:, None], nt + nr


def position_gradient(p, meas: BistaticMeasurements) -> np.ndarray:
    U, rng = _direction_matrix(np.asarray(p, dtype=float), meas.tx_pos, meas.rx_pos)
    return -2 * U.T @ (meas.d - rng)


def _off_antenna(p, meas):
    for ant in (meas.tx_pos, meas.rx_pos):
        if np.any(np.linalg.norm(p - ant, axis=1) < _PERTURB):
            p = p + _PERTURB * np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
    return p


def position_gda(p_ini, meas: BistaticMeasurements, H_prime: int = 10, precondition: str = "gn",
                 gamma_min: float = 1e-12, gamma_max: float = 1e12):
    """Barzilai-Borwein gradient descent on the bistatic range residuals.

    With precondition="gn" the gradient is multiplied by the inverse
    Gauss-Newton matrix 2 U^T U (U the stacked direction sums), which makes the
    first unit step a Gauss-Newton step; "none" gives plain BB descent. A step
    that leaves the z > 0 half space is reflected back. The best iterate is
    returned.

    Returns:
        (position, objective trace)
    """
    if len(meas) < 1:
        raise ValueError("empty cluster")
    p = np.asarray(p_ini, dtype=float).copy()
    if p[2] <= 0:
        raise ValueError("initial position must have z > 0")
    if precondition not in ("gn", "none"):
        raise ValueError("precondition must be 'gn' or 'none'")

    def direction(p):
        U, rng = _direction_matrix(p, meas.tx_pos, meas.rx_pos)
        e = meas.d - rng
        g = -2 * U.T @ e
        f = float(e @ e)
        H = 2 * U.T @ U
        if precondition == "gn":
            H = H + 1e-12 * max(np.trace(H), 1e-300) * np.eye(3)
            return f, np.linalg.solve(H, g), H
        return f, g, H

    p = _off_antenna(p, meas)
    f, dx, H = direction(p)
    trace = [f]
    best = (f, p.copy())
    gamma = 1.0 if precondition == "gn" else 1.0 / max(np.linalg.eigvalsh(H)[-1], 1e-300)
    for _ in range(H_prime):
        if not np.any(dx):
            trace.append(f)
            continue
        pn = p - gamma * dx
        if pn[2] <= 0:
            pn[2] = -pn[2] if pn[2] < 0 else _PERTURB
        pn = _off_antenna(pn, meas)
        f, dn, _ = direction(pn)
        trace.append(f)
        if f < best[0]:
            best = (f, pn.copy())
        gamma = bb_step(pn - p, dn - dx, gamma_min, gamma_max)
        p, dx = pn, dn
    return best[1], trace


def velocity_ls(p_hat, meas: BistaticMeasurements) -> np.ndarray:
    """Least-squares 3-D velocity from bistatic range rates at a known position.

    Raises:
        ValueError: Fewer than 3 measurements or rank-deficient directions.
    """
    if len(meas) < 3:
        raise ValueError("need at least 3 measurements for a 3-D velocity")
    Y, _ = _direction_matrix(np.asarray(p_hat, dtype=float), meas.tx_pos, meas.rx_pos)
    if np.linalg.matrix_rank(Y) < 3:
        raise ValueError("direction matrix is rank deficient")
    return np.linalg.lstsq(Y, meas.v, rcond=None)[0]


def _common_subset(meas: BistaticMeasurements):
    """Largest group of >= 3 measurements sharing a DSA, else sharing an Rx.

    Groups whose antenna geometry is rank deficient are skipped. Ties go to
    the lower antenna index.
    """
    for common, idx in (("tx", meas.tx_idx), ("rx", meas.rx_idx)):
        vals, counts = np.unique(idx, return_counts=True)
        order = np.lexsort((vals, -counts))
        for i in order:
            if counts[i] < 3:
                break
            sel = np.flatnonzero(idx == vals[i])
            try:
                p, fl = closed_form_position(meas.subset(sel), common, return_flags=True)
            except ValueError:
                continue
            return p, fl
    return None, ()


def locate_cluster(meas: BistaticMeasurements, H_prime: int = 10, precondition: str = "gn"):
    """Closed-form initialization, GDA refinement and velocity LS for one cluster."""
    flags = []
    p0, fl = _common_subset(meas)
    flags.extend(fl)
    if p0 is None:
        flags.append("no_closed_form")
        mid = 0.5 * (meas.tx_pos + meas.rx_pos)
        p0 = np.array([*mid[:, :2].mean(axis=0), max(np.median(meas.d) / 2, 1.0)])
    if p0[2] <= 0:
        p0[2] = max(np.median(meas.d) / 2, 1.0)
    p, trace = position_gda(p0, meas, H_prime, precondition)
    try:
        v = velocity_ls(p, meas)
    except ValueError:
        flags.append("velocity_rank_deficient")
        v = np.full(3, np.nan)
    return p, v, tuple(flags), trace


def predict_measurements(position, velocity, meas: BistaticMeasurements):
    """Bistatic ranges and range rates of a point target seen by every pair in meas."""
    U, rng = _direction_matrix(np.asarray(position, dtype=float), meas.tx_pos, meas.rx_pos)
    return rng, U @ np.nan_to_num(np.asarray(velocity, dtype=float))


def reassociate(meas: BistaticMeasurements, targets: Sequence[TargetEstimate], scales=(1.0, 1.0)):
    """Assign measurements to targets pair by pair, at most one per target and pair.

    Within each (n, j) pair the assignment minimizes the summed scaled squared
    (d, v) prediction error. Measurements left over (more paths than targets
    in a pair) get label -1.

    Returns:
        (P,) integer labels indexing into targets.
    """
    labels = np.full(len(meas), -1)
    if not targets:
        return labels
    pred = [predict_measurements(t.position, t.velocity, meas) for t in targets]
    Pd = np.stack([p[0] for p in pred], axis=1)
    Pv = np.stack([p[1] for p in pred], axis=1)
    cost = ((meas.d[:, None] - Pd) / scales[0]) ** 2 + ((meas.v[:, None] - Pv) / scales[1]) ** 2
    keys = meas.tx_idx * (meas.rx_idx.max() + 1) + meas.rx_idx
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        r, c = linear_sum_assignment(cost[idx])
        labels[idx[r]] = c
    return labels


def vibs_pipeline(estimates: Sequence[PairEstimate], geometry: ArrayGeometry, cfg: WaveformConfig,
                  plan: DssPlan, seed=None, H_prime: int = 10, mad_threshold: float = 3.5,
                  n_init: int = 20, L_hat: Optional[int] = None, precondition: str = "gn",
                  n_reassociate: int = 10, n_restarts: int = 8):
    """Pair estimates to target estimates.

    Steps: physical units, outlier elimination, K-means into
    L_hat = max_{n,j} L_hat_{n,j} clusters, and per cluster a closed-form
    start, GDA refinement and least-squares velocity. K-means groups points
    only by their (d, v) values, so targets whose spreads overlap can end up
    mixed. Up to n_reassociate rounds of reassociate followed by
    re-positioning fix this; a round is kept only if it lowers the total
    scaled prediction error. Pass n_reassociate=0 for the plain pipeline.
    Besides K-means on (d, v), on d only and on v only, n_restarts random
    partitions that give each target at most one measurement per pair are
    refined the same way; the complete partition with the lowest error wins.

    Returns:
        (targets, measurements, clusters) where clusters index into the
        filtered measurement set.
    """
    meas = BistaticMeasurements.from_estimates(estimates, geometry, plan, cfg)
    if L_hat is None:
        L_hat = max((e.L_hat for e in estimates), default=0)
    if L_hat == 0 or len(meas) == 0:
        return [], meas, []
    filt, _ = eliminate_outliers(meas, mad_threshold)
    L_hat = min(L_hat, len(filt))
    scales = tuple(max(_mad(x), 1e-3) for x in (filt.d, filt.v))

    def solve(clusters):
        out = []
        for c in clusters:
            p, v, flags, trace = locate_cluster(filt.subset(c.members), H_prime, precondition)
            if c.P < 3:
                flags = flags + ("small_cluster",)
            out.append(TargetEstimate(p, v, c.label, flags, trace))
        return out

    def misfit(targets, clusters):
        tot = 0.0
        for t, c in zip(targets, clusters):
            sub = filt.subset(c.members)
            d, v = predict_measurements(t.position, t.velocity, sub)
            tot += np.sum(((sub.d - d) / scales[0]) ** 2 + ((sub.v - v) / scales[1]) ** 2)
        return tot

    def refine(clusters):
        targets = solve(clusters)
        cost = misfit(targets, clusters)
        for _ in range(n_reassociate):
            labels = reassociate(filt, targets, scales)
            new = [Cluster(np.flatnonzero(labels == l), l) for l in range(len(targets))
                   if np.any(labels == l)]
            if len(new) < len(targets) or all(
                    np.array_equal(a.members, b.members) for a, b in zip(new, clusters)):
                break
            cand = solve(new)
            c_new = misfit(cand, new)
            if c_new >= cost:
                break
            targets, clusters, cost = cand, new, c_new
        return cost, targets, clusters

    best = refine(cluster_measurements(filt, L_hat, seed, n_init))
    if n_reassociate > 0 and L_hat > 1:
        # K-means on a single coordinate gives alternative starting partitions
        starts = []
        for w in ((1.0, 0.0), (0.0, 1.0)):
            if np.ptp(filt.d if w[0] else filt.v) == 0:
                continue
            starts.append(cluster_measurements(filt, L_hat, seed, n_init, weights=w))
        rng = np.random.default_rng(seed)
        keys = filt.tx_idx * (filt.rx_idx.max() + 1) + filt.rx_idx
        for _ in range(n_restarts):
            labels = np.empty(len(filt), dtype=int)
            for key in np.unique(keys):
                idx = np.flatnonzero(keys == key)
                labels[idx] = rng.permutation(max(L_hat, idx.size))[:idx.size] % L_hat
            starts.append([Cluster(np.flatnonzero(labels == l), l) for l in range(L_hat) if np.any(labels == l)])
        for start in starts:
            cand = refine(start)
            # a partition with fewer clusters explains fewer points, so never prefer it
            if (-len(cand[1]), cand[0]) < (-len(best[1]), best[0]):
                best = cand
    return best[1], filt, best[2]


class VirtualBistaticSensing(BaseEstimator):
    """Estimator wrapper around vibs_pipeline.

    fit takes the per-pair estimates of one sensing frame and stores
    targets_, positions_ and velocities_.
    """

    def __init__(self, geometry: Optional[ArrayGeometry] = None, cfg: Optional[WaveformConfig] = None,
                 plan: Optional[DssPlan] = None, H_prime: int = 10, mad_threshold: float = 3.5,
                 n_init: int = 20, random_state=None, precondition: str = "gn", n_restarts: int = 8):
        self.geometry = geometry
        self.cfg = cfg
        self.plan = plan
        self.H_prime = H_prime
        self.mad_threshold = mad_threshold
        self.n_init = n_init
        self.random_state = random_state
        self.precondition = precondition
        self.n_restarts = n_restarts

    def fit(self, X: Sequence[PairEstimate], y=None):
        if self.geometry is None or self.cfg is None or self.plan is None:
            raise ValueError("geometry, cfg and plan are required")
        self.targets_, self.measurements_, self.clusters_ = vibs_pipeline(
            X, self.geometry, self.cfg, self.plan, self.random_state, self.H_prime,
            self.mad_threshold, self.n_init, precondition=self.precondition, n_restarts=self.n_restarts)
        self.positions_ = np.array([t.position for t in self.targets_]).reshape(-1, 3)
        self.velocities_ = np.array([t.velocity for t in self.targets_]).reshape(-1, 3)
        return self

    def predict(self, X: Sequence[PairEstimate]):
        return self.fit(X).positions_


def write_target_csv(targets: Sequence[TargetEstimate], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "x", "y", "z", "vx", "vy", "vz", "flags"])
        for t in targets:
            w.writerow([t.cluster, *map(repr, map(float, t.position)),
                        *map(repr, map(float, t.velocity)), "|".join(t.flags)])
