"""Downlink pilots, polar-domain channel estimation with sensing aid, and BER simulation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .scene import near_field_steering
from .waveform import SPEED_OF_LIGHT, dfnt_matrix


@dataclass(frozen=True)
class PilotBlock:
    """Shortened OCDM pilot symbols.

    Attributes:
        X: (N_CE, G, N_Tx) QPSK constellation symbols.
        S: (N_CE, G, N_Tx) DFnT-modulated chips, S_p = Phi^H X_p.
    """

    X: np.ndarray
    S: np.ndarray

    @property
    def N_CE(self) -> int:
        return self.X.shape[0]

    @property
    def G(self) -> int:
        return self.X.shape[1]

    @property
    def n_tx(self) -> int:
        return self.X.shape[2]


def qpsk(rng, shape) -> np.ndarray:
    b = rng.integers(0, 2, size=(2,) + tuple(shape))
    return ((1 - 2 * b[0]) + 1j * (1 - 2 * b[1])) / np.sqrt(2)


def generate_pilots(N_CE: int, G: int, n_tx: int, seed=None) -> PilotBlock:
    """Draw N_CE QPSK pilot blocks and modulate them along the chip axis."""
    if N_CE < 1 or n_tx < 1:
        raise ValueError("N_CE and N_Tx must be positive")
    Phi = dfnt_matrix(G)
    X = qpsk(np.random.default_rng(seed), (N_CE, G, n_tx))
    S = np.einsum("ji,pjt->pit", Phi.conj(), X)
    return PilotBlock(X, S)


def simulate_pilot_rx(pilots: PilotBlock, cir_taps, P: float, noise_var: float = 0.0, seed=None):
    """Received pilot samples y_p = sqrt(P) sum_a (h_a circ s_{p,a}) + n_p.

    The circular convolution over the G chips is evaluated with FFTs.

    Returns:
        (N_CE, G) complex array.
    """
    h = np.asarray(cir_taps, dtype=complex)
    if h.shape != (pilots.G, pilots.n_tx):
        raise ValueError(f"taps must have shape {(pilots.G, pilots.n_tx)}, got {h.shape}")
    Hf = np.fft.fft(h, axis=0)
    Sf = np.fft.fft(pilots.S, axis=1)
    y = np.sqrt(P) * np.fft.ifft(np.sum(Sf * Hf[None], axis=2), axis=1)
    if noise_var > 0:
        rng = np.random.default_rng(seed)
        y = y + np.sqrt(noise_var / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y


@dataclass(frozen=True)
class FdObservations:
    """Per-subcarrier pilot observations y_g = sqrt(P) D_g h_g + n_g.

    Attributes:
        y: (G, N_CE) observations, row g is y_g.
        D: (G, N_CE, N_Tx) pilot matrices.
        P: Transmit power.
        noise_var: Noise variance per observation.
    """

    y: np.ndarray
    D: np.ndarray
    P: float
    noise_var: float = 0.0

    def __post_init__(self):
        if self.y.shape != self.D.shape[:2]:
            raise ValueError("observation and pilot matrix shapes disagree")

    @property
    def G(self) -> int:
        return self.y.shape[0]

    @property
    def N_CE(self) -> int:
        return self.y.shape[1]


def assemble_fd(pilots: PilotBlock, received, P: float, noise_var: float = 0.0) -> FdObservations:
    """Unitary DFT of each received block and per-subcarrier pilot matrices.

    D_g rows are d_{p,g} = sum_g' s_{p,g'} exp(-j 2 pi g g' / G), without
    1/sqrt(G) normalization.
    """
    y = np.fft.fft(np.asarray(received, dtype=complex), axis=1, norm="ortho").T
    D = np.transpose(np.fft.fft(pilots.S, axis=1), (1, 0, 2))
    return FdObservations(np.ascontiguousarray(y), np.ascontiguousarray(D), P, noise_var)


@dataclass(frozen=True)
class PolarDictionary:
    """Near-field steering atoms on an (angle, distance) grid.

    Attributes:
        W: (N_Tx, N_Pd) unit-norm atoms.
        distance: (N_Pd,) atom distance [m] from the array centre; inf for
            far-field atoms.
        sine: (N_Pd,) direction cosine to the array axis.
        ring_step: Spacing of the reciprocal-distance rings at broadside [1/m].
    """

    W: np.ndarray
    distance: np.ndarray
    sine: np.ndarray
    ring_step: float

    @property
    def n_atoms(self) -> int:
        return self.W.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["atom", "distance_m", "sine"])
            for i, (d, s) in enumerate(zip(self.distance, self.sine)):
                w.writerow([i, repr(float(d)), repr(float(s))])


def _atom(tx, center, r, s, f_c):
    if np.isinf(r):
        ph = (tx[:, 0] * s) * f_c / SPEED_OF_LIGHT
        ph = ph - np.round(ph)
        return np.exp(2j * np.pi * ph) / np.sqrt(tx.shape[0])
    p = center + r * np.array([s, np.sqrt(max(1 - s * s, 0.0)), 0.0])
    return near_field_steering(p, tx, f_c)


def ring_step(tx_positions, f_c: float, coherence: float = 0.95) -> float:
    """Reciprocal-distance step at broadside whose atom coherence equals `coherence`.

    The coherence between the far-field atom and the atom at 1/r = step is
    bisected on the exact spherical steering vectors.
    """
    tx = np.asarray(tx_positions, dtype=float)
    center = tx.mean(axis=0)
    far = _atom(tx, center, np.inf, 0.0, f_c)

    def coh(rho):
        return abs(np.vdot(far, _atom(tx, center, 1.0 / rho, 0.0, f_c)))

    hi = 1e-6
    while coh(hi) > coherence:
        hi *= 2
        if hi > 1e6:
            raise ValueError("could not bracket the coherence target")
    lo = hi / 2 if hi > 1e-6 else 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if coh(mid) > coherence:
            lo = mid
        else:
            hi = mid
    return hi


def build_polar_dictionary(tx_positions, f_c: float, d_min: float = 3.0, d_max: float = 20.0,
                           angle_oversample: int = 2, coherence: float = 0.95) -> PolarDictionary:
    """Polar-domain dictionary of near-field steering vectors.

    Angles: angle_oversample * N_Tx direction cosines uniform on [-1, 1).
    Distances: for direction cosine s the rings sit at
    r_k = (1 - s^2) / (k * step), k = 1, 2, ..., kept when
    d_min <= r_k <= d_max, plus one far-field atom per angle. step is chosen
    by ring_step so that adjacent broadside rings have the given coherence.
    """
    tx = np.asarray(tx_positions, dtype=float)
    n = tx.shape[0]
    aperture = np.ptp(tx, axis=0).max() if n > 1 else 0.0
    if d_min <= aperture / 2:
        raise ValueError(f"d_min ({d_min}) must exceed half the aperture ({aperture / 2:.3f} m)")
    if d_max < d_min:
        raise ValueError("d_max must be >= d_min")
    center = tx.mean(axis=0)
    step = ring_step(tx, f_c, coherence) if n > 1 else np.inf
    n_ang = int(angle_oversample * n)
    sines = (2 * np.arange(n_ang) - n_ang + 1) / n_ang
    cols, dist, sin_ = [], [], []
    for s in sines:
        c2 = 1 - s * s
        rings = [np.inf]
        if np.isfinite(step) and c2 > 0:
            k_lo = int(np.ceil(c2 / (d_max * step) - 1e-12))
            k_hi = int(np.floor(c2 / (d_min * step) + 1e-12))
            rings += [c2 / (k * step) for k in range(max(k_lo, 1), k_hi + 1)]
        for r in rings:
            cols.append(_atom(tx, center, r, s, f_c))
            dist.append(r)
            sin_.append(s)
    if not cols:
        raise ValueError("empty dictionary grid")
    W = np.stack(cols, axis=1)
    return PolarDictionary(W, np.array(dist), np.array(sin_), float(step))


def mutual_coherence(W) -> float:
    W = np.asarray(W)
    Gm = np.abs(W.conj().T @ W)
    np.fill_diagonal(Gm, 0)
    return float(Gm.max())


@dataclass
class CeResult:
    """Channel estimates on the G subcarriers.

    Attributes:
        h_ini: (G, N_Tx) DOMP estimate.
        h_enh: (G, N_Tx) sensing-enhanced estimate (equals h_ini before
            enhancement).
        support: Selected dictionary atom indices, in selection order.
        W_sel: (N_Tx, |support|) selected atoms, after any replacement.
        replaced: Positions in support whose atom was replaced by a sensed
            steering vector.
        residual_norms: Residual norm after each iteration.
        flags: Diagnostics.
    """

    h_ini: np.ndarray
    h_enh: np.ndarray
    support: list
    W_sel: np.ndarray
    replaced: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def _ls(A, y):
    """Least squares with a rank check; returns None for a rank-deficient A."""
    if A.shape[1] == 0:
        return np.zeros(0, dtype=complex)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-10 * s[0] or A.shape[0] < A.shape[1]:
        return None
    return np.linalg.lstsq(A, y, rcond=None)[0]


def domp(fd: FdObservations, W, n_iterations: int = 10, tol: float = 1e-10) -> CeResult:
    """Distributed OMP with one support shared by all subcarriers.

    Each iteration adds the atom maximizing sum_g |(A_g)^H r_g| with
    A_g = sqrt(P) D_g W, solves a per-subcarrier LS on the support and updates
    the residuals. Stops early once every residual is below tol times the
    observation norm. An atom that makes the LS rank deficient is dropped and
    flagged.
    """
    if n_iterations > fd.N_CE:
        raise ValueError(f"n_iterations ({n_iterations}) exceeds N_CE ({fd.N_CE})")
    W = np.asarray(W)
    G, n_tx = fd.G, fd.D.shape[2]
    A = np.sqrt(fd.P) * fd.D
    y = fd.y
    r = y.copy()
    y_norm = np.linalg.norm(y)
    support, flags, norms = [], [], []
    banned = np.zeros(W.shape[1], dtype=bool)
    coef = np.zeros((G, 0), dtype=complex)
    if y_norm == 0:
        return CeResult(np.zeros((G, n_tx), complex), np.zeros((G, n_tx), complex), [],
                        W[:, []], flags=["zero_observations"])
    for _ in range(n_iterations):
        if np.linalg.norm(r) <= tol * y_norm:
            break
        # sum_g |W^H A_g^H r_g|
        back = np.einsum("gpt,gp->tg", A.conj(), r)
        score = np.sum(np.abs(W.conj().T @ back), axis=1)
        score[banned] = -1
        i = int(np.argmax(score))
        banned[i] = True
        trial = support + [i]
        Ws = W[:, trial]
        new = np.zeros((G, len(trial)), dtype=complex)
        ok = True
        for g in range(G):
            c = _ls(A[g] @ Ws, y[g])
            if c is None:
                ok = False
                break
            new[g] = c
        if not ok:
            flags.append(f"skipped_atom_{i}")
            continue
        support, coef = trial, new
        r = y - np.einsum("gpt,tk,gk->gp", A, Ws, coef)
        norms.append(float(np.linalg.norm(r)))
    Ws = W[:, support]
    h = coef @ Ws.T
    return CeResult(h, h.copy(), support, Ws.copy(), residual_norms=norms, flags=flags)


def sensing_enhance(ce: CeResult, sensing_positions, epsilon: float, tx_positions, f_c: float) -> CeResult:
    """Replace selected atoms that match a sensed target by its steering vector.

    A selected atom is replaced when |w^H a_sen| >= epsilon. If several sensed
    targets match one atom, the best match wins. Duplicate columns produced by
    the replacement are merged. No channel ground truth is used.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    W_sel = ce.W_sel.copy()
    pos = np.asarray(sensing_positions, dtype=float).reshape(-1, 3)
    if W_sel.shape[1] == 0 or pos.shape[0] == 0:
        return CeResult(ce.h_ini, ce.h_enh, list(ce.support), W_sel, [], ce.residual_norms, list(ce.flags))
    A_sen = np.stack([near_field_steering(p, tx_positions, f_c) for p in pos], axis=1)
    C = np.abs(W_sel.conj().T @ A_sen)
    best = np.argmax(C, axis=1)
    hit = np.flatnonzero(C[np.arange(C.shape[0]), best] >= epsilon)
    W_sel[:, hit] = A_sen[:, best[hit]]
    # merge columns that now hold the same sensed vector
    keep, seen = [], set()
    for i in range(W_sel.shape[1]):
        key = int(best[i]) if i in set(hit) else None
        if key is not None and key in seen:
            continue
        if key is not None:
            seen.add(key)
        keep.append(i)
    return CeResult(ce.h_ini, ce.h_enh, [ce.support[i] for i in keep], W_sel[:, keep],
                    [int(i) for i in hit], ce.residual_norms, list(ce.flags))


def refine_ls(W_sel, fd: FdObservations) -> np.ndarray:
    """Per-subcarrier LS on the columns of W_sel; returns (G, N_Tx) estimates."""
    W_sel = np.asarray(W_sel)
    if W_sel.shape[1] > fd.N_CE:
        raise ValueError("support larger than N_CE leaves the LS underdetermined")
    out = np.zeros((fd.G, W_sel.shape[0]), dtype=complex)
    if W_sel.shape[1] == 0:
        return out
    for g in range(fd.G):
        A = np.sqrt(fd.P) * fd.D[g] @ W_sel
        c = np.linalg.lstsq(A, fd.y[g], rcond=None)[0]
        out[g] = W_sel @ c
    return out


class SensingEnhancedChannelEstimator(BaseEstimator):
    """DOMP channel estimation with optional sensing-aided atom replacement.

    fit(fd, sensing_positions) stores result_ (a CeResult); predict returns
    the enhanced estimate when positions were given, else the DOMP one.
    """

    def __init__(self, dictionary: Optional[PolarDictionary] = None, tx_positions=None,
                 f_c: float = 30e9, n_iterations: int = 10, epsilon: float = 0.6):
        self.dictionary = dictionary
        self.tx_positions = tx_positions
        self.f_c = f_c
        self.n_iterations = n_iterations
        self.epsilon = epsilon

    def fit(self, X: FdObservations, y=None, sensing_positions=None):
        if self.dictionary is None:
            raise ValueError("a PolarDictionary is required")
        ce = domp(X, self.dictionary.W, self.n_iterations)
        if sensing_positions is not None and len(np.atleast_1d(sensing_positions)):
            if self.tx_positions is None:
                raise ValueError("tx_positions are required for sensing enhancement")
            ce = sensing_enhance(ce, sensing_positions, self.epsilon, self.tx_positions, self.f_c)
            ce.h_enh = refine_ls(ce.W_sel, X)
        self.result_ = ce
        return self

    def predict(self, X: FdObservations = None):
        return self.result_.h_enh


# ---------------------------------------------------------------- downlink BER

_GRAY = np.array([-3.0, -1.0, 3.0, 1.0])  # index b0 b1 -> level, Gray coded


def qam16_modulate(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=int).reshape(-1, 4)
    i = _GRAY[2 * b[:, 0] + b[:, 1]]
    q = _GRAY[2 * b[:, 2] + b[:, 3]]
    return (i + 1j * q) / np.sqrt(10)


def qam16_demodulate(sym) -> np.ndarray:
    s = np.asarray(sym) * np.sqrt(10)

    def axis_bits(x):
        b0 = (x > 0).astype(int)
        b1 = (np.abs(x) < 2).astype(int)
        return b0, b1

    i0, i1 = axis_bits(s.real)
    q0, q1 = axis_bits(s.imag)
    return np.stack([i0, i1, q0, q1], axis=1).reshape(-1)


def taps_from_fd(h_fd) -> np.ndarray:
    """Inverse of comm_channel_fd: G frequency-domain vectors to G taps."""
    return np.fft.ifft(np.asarray(h_fd, dtype=complex), axis=0, norm="ortho")


def channel_on_subcarriers(taps, K: int) -> np.ndarray:
    """(K, N_Tx) channel at the K data subcarriers from (G, N_Tx) taps."""
    taps = np.asarray(taps, dtype=complex)
    if taps.shape[0] > K:
        raise ValueError("more taps than subcarriers")
    return np.fft.fft(taps, n=K, axis=0)


def beamformer(h_est_sc, mode: str = "wideband") -> np.ndarray:
    """Transmit weights from an estimated (K, N_Tx) channel.

    "per_subcarrier": w_k = conj(h_k) / |h_k|^2, so every subcarrier sees a
    unit gain. "wideband": one weight vector for all subcarriers, the
    principal eigenvector of sum_k conj(h_k) h_k^T, scaled so that the mean
    estimated subcarrier power gain is one.

    Returns:
        (K, N_Tx) weights (rows identical in wideband mode).
    """
    H = np.asarray(h_est_sc, dtype=complex)
    if mode == "per_subcarrier":
        nrm = np.sum(np.abs(H) ** 2, axis=1, keepdims=True)
        return H.conj() / np.maximum(nrm, 1e-300)
    if mode != "wideband":
        raise ValueError(f"unknown beamforming mode {mode!r}")
    _, _, Vh = np.linalg.svd(H, full_matrices=False)
    u = Vh[0].conj()
    gain = np.mean(np.abs(H @ u) ** 2)
    w = u / np.sqrt(max(gain, 1e-300))
    return np.broadcast_to(w, H.shape).copy()


def ber_pipeline(h_true_taps, h_est_taps=None, waveform: str = "ocdm", snr_db: float = 15.0,
                 n_bits: int = 100_000, seed=None, K: int = 256, P: float = 1.0,
                 beamforming: str = "wideband", noiseless: bool = False):
    """Downlink 16-QAM BER over a beamformed multi-antenna channel.

    Data symbols fill all K subcarriers. OCDM spreads each block with the
    K-point DFnT, OFDM sends it directly on the subcarriers. A cyclic prefix
    no shorter than the channel makes the link diagonal in the frequency
    domain, so the simulation runs there: Y_k = sqrt(P) c_k S_k + N_k with
    c_k = h_k^T w_k, noise variance P / SNR, per-subcarrier MMSE
    equalization with the true effective gains, then the inverse DFnT for
    OCDM and hard demapping.

    Args:
        h_true_taps: (G, N_Tx) true channel taps.
        h_est_taps: (G, N_Tx) taps used for beamforming; None means perfect CSI.
        waveform: "ocdm" or "ofdm".
        n_bits: Multiple of 4 K; rounded down to whole blocks otherwise.

    Returns:
        (ber, n_bits_simulated)
    """
    if waveform not in ("ocdm", "ofdm"):
        raise ValueError("waveform must be 'ocdm' or 'ofdm'")
    if n_bits % (4 * K):
        raise ValueError(f"n_bits must be a multiple of 4*K = {4 * K}")
    rng = np.random.default_rng(seed)
    H = channel_on_subcarriers(h_true_taps, K)
    He = H if h_est_taps is None else channel_on_subcarriers(h_est_taps, K)
    w = beamformer(He, beamforming)
    c = np.sum(H * w, axis=1)
    n_blk = n_bits // (4 * K)
    bits = rng.integers(0, 2, size=(n_blk, 4 * K))
    x = qam16_modulate(bits).reshape(n_blk, K)
    if waveform == "ocdm":
        Phi = dfnt_matrix(K)
        S = np.fft.fft(x @ Phi.conj(), axis=1, norm="ortho")
    else:
        S = x
    nv = 0.0 if noiseless else P / 10 ** (snr_db / 10)
    Y = np.sqrt(P) * c[None, :] * S
    if nv > 0:
        Y = Y + np.sqrt(nv / 2) * (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
    g = np.sqrt(P) * c
    S_hat = g.conj() * Y / (np.abs(g) ** 2 + nv)
    if waveform == "ocdm":
        x_hat = np.fft.ifft(S_hat, axis=1, norm="ortho") @ Phi.T
    else:
        x_hat = S_hat
    bits_hat = qam16_demodulate(x_hat.reshape(-1)).reshape(n_blk, 4 * K)
    errors = int(np.sum(bits_hat != bits))
    return errors / bits.size, int(bits.size)
