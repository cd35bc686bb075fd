"""FMCW dechirp reception of OCDM sensing subcarriers.

Provides the closed-form intermediate-frequency (IF) signal of two mixed
chirps, the response vector with its blank window and phase jump, the
analytic measurement synthesis and a brute-force continuous-time oracle.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import derive_rng
from .scene import Scene, bistatic_delay, bistatic_velocity
from .waveform import DssPlan, WaveformConfig, chirp_eval

_XTOL = 1e-9  # tolerance on normalized time x = t / T


@dataclass(frozen=True)
class IfRegion:
    region: str
    start: float
    end: float


@dataclass(frozen=True)
class ResponseBasis:
    """Region membership of the sample grid for one DSS and delay.

    Index sets are zero-based sample indices.
    """

    omega_I: np.ndarray
    omega_II: np.ndarray
    omega_III: np.ndarray
    phi: float


def _check_tau(tau, cfg):
    tau = np.asarray(tau, dtype=float)
    if np.any((tau < 0) | (tau >= cfg.T_GI)) or not np.all(np.isfinite(tau)):
        raise ValueError(f"delay must lie in [0, T_GI={cfg.T_GI}), got {tau}")
    return tau


def _breakpoints(k, k2, tau, cfg):
    """Blank-window start and end [s] for reference chirp k and echo chirp k2."""
    a = k / cfg.B
    b = k2 / cfg.B + tau
    bws = np.maximum(tau, np.minimum(a, b))
    bwe = np.minimum(cfg.T, np.maximum(a, b))
    return bws, bwe


def if_regions(n: int, n2: int, tau: float, cfg: WaveformConfig, plan: DssPlan):
    """The three IF regions for reference DSS n and echo DSS n2 at delay tau."""
    tau = float(_check_tau(tau, cfg))
    bws, bwe = _breakpoints(plan.dss[n], plan.dss[n2], tau, cfg)
    return (IfRegion("I", tau, float(bws)), IfRegion("II", float(bws), float(bwe)),
            IfRegion("III", float(bwe), cfg.T))


def _if_phase_cycles(k, k2, tau, x, cfg):
    """IF phase in cycles for reference k, echo k2, normalized time x."""
    K = cfg.K
    tb = tau / cfg.T
    const = (((k - K // 2) % K) ** 2 - ((k2 - K // 2) % K) ** 2) / (2.0 * K)
    phi1 = -k2 * tb + 0.5 * K * tb - 0.5 * K * tb ** 2
    cyc = const + phi1 + (k2 - k) * x + K * tb * x
    xa = k / K
    xb = k2 / K + tb
    ref_wrapped = x >= max(xa, tb) - _XTOL
    echo_wrapped = x >= xb - _XTOL
    # region II: one chirp has wrapped; region III: both have
    extra = np.where(ref_wrapped & echo_wrapped, -K * tb,
                     np.where(ref_wrapped, -K * x,
                              np.where(echo_wrapped, K * x - K * tb, 0.0)))
    return cyc + extra


def if_closed_form(n: int, n2: int, tau: float, t, cfg: WaveformConfig, plan: DssPlan):
    """Closed-form IF signal of echo DSS n2 mixed with reference DSS n."""
    tau = float(_check_tau(tau, cfg))
    t = np.asarray(t, dtype=float)
    if np.any((t < tau) | (t >= cfg.T)):
        raise ValueError("t must lie in [tau, T)")
    cyc = _if_phase_cycles(plan.dss[n], plan.dss[n2], tau, t / cfg.T, cfg)
    return np.exp(2j * np.pi * (cyc - np.round(cyc)))


def if_direct(n: int, n2: int, tau: float, t, cfg: WaveformConfig, plan: DssPlan):
    """IF signal by direct evaluation of the two chirps, the closed-form oracle."""
    tau = float(_check_tau(tau, cfg))
    t = np.asarray(t, dtype=float)
    if np.any(t >= cfg.T) or np.any(t < 0):
        raise ValueError("t must lie in [0, T)")
    return chirp_eval(plan.dss[n2], t - tau, cfg) * np.conj(chirp_eval(plan.dss[n], t, cfg))


def _region_codes(k, mu, cfg):
    """Region code (0: I, 1: II, 2: III) per sample for each mu, shape (Q, len(mu))."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    tb = mu * cfg.f_ADC / cfg.B  # tau / T
    xq = (cfg.B * cfg.T_GI + np.arange(cfg.Q) * cfg.B / cfg.f_ADC) / cfg.K
    xa = k / cfg.K
    bws = np.maximum(tb, xa)
    bwe = np.minimum(1.0, xa + tb)
    code = np.where(xq[:, None] < bws[None, :] - _XTOL, 0,
                    np.where(xq[:, None] < bwe[None, :] - _XTOL, 1, 2))
    return code


def response_basis(k: int, mu: float, cfg: WaveformConfig) -> ResponseBasis:
    code = _region_codes(k, mu, cfg)[:, 0]
    return ResponseBasis(np.flatnonzero(code == 0), np.flatnonzero(code == 1),
                         np.flatnonzero(code == 2), 2 * np.pi * cfg.f_ADC * cfg.T)


def response_matrix(k: int, mu, cfg: WaveformConfig) -> np.ndarray:
    """Stack of response vectors b(mu_l) as columns, shape (Q, L).

    No range check on mu; region membership uses the delay mu f_ADC T / B
    directly. Used by the estimators where iterates may leave the guard range.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    code = _region_codes(k, mu, cfg)
    q = np.arange(cfg.Q)[:, None]
    phi = cfg.f_ADC * cfg.T  # in cycles
    cyc = mu[None, :] * q - np.where(code == 2, mu[None, :] * phi, 0.0)
    b = np.exp(2j * np.pi * (cyc - np.round(cyc)))
    b[code == 1] = 0
    return b


def response_vector(n: int, mu: float, cfg: WaveformConfig, plan: DssPlan) -> np.ndarray:
    """Response vector of DSS n at normalized delay mu (zero-based sample index)."""
    mu = float(mu)
    if not 0 <= mu < cfg.mu_max:
        raise ValueError(f"mu must lie in [0, {cfg.mu_max})")
    return response_matrix(plan.dss[n], mu, cfg)[:, 0]


def doppler_matrix(nu, M: int) -> np.ndarray:
    """Columns a(nu_l) = exp(j 2 pi nu_l m), m = 0..M-1, shape (M, L)."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    cyc = np.arange(M)[:, None] * nu[None, :]
    return np.exp(2j * np.pi * (cyc - np.round(cyc)))


def breakpoint_mus(k: int, cfg: WaveformConfig) -> np.ndarray:
    """Normalized delays in [0, mu_max] at which a sample changes region."""
    xq = (cfg.B * cfg.T_GI + np.arange(cfg.Q) * cfg.B / cfg.f_ADC) / cfg.K
    tb = xq - k / cfg.K
    mu = tb * cfg.B / cfg.f_ADC
    return mu[(mu >= -1e-12) & (mu <= cfg.mu_max + 1e-12)]


@dataclass(frozen=True)
class PairTruth:
    """Per-pair ground truth, arrays of shape (N, N_Rx, L)."""

    tau: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray


def pair_truth(scene: Scene, gains, plan: DssPlan, cfg: WaveformConfig) -> PairTruth:
    """Normalized delay/Doppler and effective amplitude of every path."""
    geo = scene.geometry
    N, J, L = plan.N, geo.n_rx, scene.L
    gains = np.asarray(gains, dtype=complex).reshape(N, J, L)
    tau = np.zeros((N, J, L))
    v = np.zeros((N, J, L))
    for n, i in enumerate(plan.dsa):
        tx = geo.tx_positions[i]
        for l, tg in enumerate(scene.targets):
            tau[n, :, l] = bistatic_delay(tg.position, tx, geo.rx_positions)
            v[n, :, l] = bistatic_velocity(tg.position, tg.velocity, tx, geo.rx_positions)
    if np.any(tau >= cfg.T_GI):
        raise ValueError("bistatic delay reaches the guard interval")
    mu = cfg.B * tau / (cfg.f_ADC * cfg.T)
    nu = v * cfg.symbol_period / cfg.wavelength
    k = np.asarray(plan.dss, dtype=float)[:, None, None]
    tb = tau / cfg.T
    # carrier phase, in-symbol beat and Doppler at the first sample, region-I constant
    cyc = (-cfg.f_c * tau
           + (cfg.K * tb - v / cfg.wavelength * cfg.T) * cfg.T_GI / cfg.T
           - k * tb + 0.5 * cfg.K * tb - 0.5 * cfg.K * tb ** 2)
    cyc = np.mod(cyc, 1.0)
    alpha = (cfg.P_Tx / N) * gains * np.exp(2j * np.pi * cyc)
    return PairTruth(tau, v, mu, nu, alpha)


@dataclass
class MeasurementCube:
    """Digitized dechirp measurements, data[n, j] is the Q x M matrix of pair (n, j)."""

    data: np.ndarray
    noise_var: float
    plan: DssPlan
    cfg: WaveformConfig

    def __post_init__(self):
        N, J, Q, M = self.data.shape
        if Q != self.cfg.Q or M != self.cfg.M or N != self.plan.N:
            raise ValueError("cube dimensions disagree with the configuration")

    @property
    def n_rx(self) -> int:
        return self.data.shape[1]

    def pair(self, n: int, j: int) -> np.ndarray:
        return self.data[n, j]

    _MAGIC = b"OCDMCUBE1\n"

    def dump(self, path) -> None:
        """Write a binary dump: magic, header length, JSON header, pair payloads.

        Each pair is stored as interleaved float64 real/imag in column-major
        (symbol-major) order; pairs are ordered n-major then j.
        """
        N, J, Q, M = self.data.shape
        header = {"N": N, "N_Rx": J, "Q": Q, "M": M, "noise_var": float(self.noise_var),
                  "plan": self.plan.to_dict(), "cfg": self.cfg.to_dict(),
                  "sample_index_base": 1, "order": "column-major"}
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            for n in range(N):
                for j in range(J):
                    col = np.ascontiguousarray(self.data[n, j].T).astype("<c16")
                    fh.write(col.view("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MeasurementCube":
        with open(path, "rb") as fh:
            if fh.read(len(cls._MAGIC)) != cls._MAGIC:
                raise ValueError("not a measurement cube dump")
            (hl,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hl))
            raw = np.frombuffer(fh.read(), dtype="<f8")
        N, J, Q, M = header["N"], header["N_Rx"], header["Q"], header["M"]
        z = raw.view("<c16").reshape(N, J, M, Q)
        data = np.ascontiguousarray(np.swapaxes(z, 2, 3)).astype(complex)
        return cls(data, header["noise_var"], DssPlan(**header["plan"]),
                   WaveformConfig(**header["cfg"]))


def synthesize_measurements(scene: Scene, gains, plan: DssPlan, cfg: WaveformConfig,
                            noise_var: float = 0.0, seed=None,
                            truth: Optional[PairTruth] = None) -> MeasurementCube:
    """Analytic digitized measurements with i.i.d. CN(0, noise_var) noise.

    Each pair (n, j) draws its noise from its own stream keyed on (n, j).
    """
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    N, J = plan.N, scene.geometry.n_rx
    for i in plan.dsa:
        if i >= scene.geometry.n_tx:
            raise ValueError("DSA index exceeds the transmit array")
    tr = truth if truth is not None else pair_truth(scene, gains, plan, cfg)
    data = np.zeros((N, J, cfg.Q, cfg.M), dtype=complex)
    for n in range(N):
        for j in range(J):
            if scene.L:
                Bm = response_matrix(plan.dss[n], tr.mu[n, j], cfg)
                Am = doppler_matrix(tr.nu[n, j], cfg.M)
                data[n, j] = (Bm * tr.alpha[n, j][None, :]) @ Am.conj().T
            if noise_var > 0:
                rng = derive_rng(seed, n, j)
                w = rng.standard_normal((2, cfg.Q, cfg.M))
                data[n, j] += np.sqrt(noise_var / 2) * (w[0] + 1j * w[1])
    return MeasurementCube(data, float(noise_var), plan, cfg)


def _lowpass_at_samples(sig, cfg, fs, t_samples):
    """Brick-wall low-pass of one symbol of sig (dense grid) evaluated at t_samples."""
    n = sig.shape[-1]
    spec = np.fft.fft(sig, axis=-1) / n
    f = np.fft.fftfreq(n, d=1.0 / fs)
    keep = np.abs(f) <= cfg.f_LPF * (1 + 1e-12)
    # exact evaluation of the retained Fourier series at the ADC instants
    basis = np.exp(2j * np.pi * np.outer(f[keep], t_samples))
    return spec[..., keep] @ basis


def continuous_time_oracle(scene: Scene, gains, plan: DssPlan, cfg: WaveformConfig,
                           oversample_factor: int = 8, exact_motion: bool = False,
                           include_self: bool = True, include_cross: bool = True,
                           sample_budget: int = 50_000_000) -> MeasurementCube:
    """Brute-force mixer / brick-wall LPF / ADC simulation of every pair.

    Each symbol is simulated on a dense grid at oversample_factor * B over
    [0, T): all DSA echoes (exact chirp waveforms with their delays) are
    superposed, mixed with the conjugate reference chirp, low-passed by an
    ideal frequency-domain mask at f_LPF and read out at the ADC instants.

    Args:
        exact_motion: Move targets between symbols (positions at the symbol
            start) instead of applying a fixed symbol-to-symbol Doppler phase.
        include_self, include_cross: Keep the n' = n echo and/or the
            other-DSS echoes; used to measure cross-DSS leakage.
        sample_budget: Upper bound on dense samples generated in total.
    """
    if oversample_factor < 4:
        raise ValueError("oversample_factor must be >= 4")
    geo = scene.geometry
    N, J, L = plan.N, geo.n_rx, scene.L
    nd = int(oversample_factor * cfg.K)
    fs = oversample_factor * cfg.B
    n_sym = cfg.M if exact_motion else 1
    total = N * J * N * max(L, 1) * nd * n_sym
    if total > sample_budget:
        raise MemoryError(f"oracle needs {total} dense samples, budget is {sample_budget}")
    t = np.arange(nd) / fs
    ts = cfg.sample_times
    data = np.zeros((N, J, cfg.Q, cfg.M), dtype=complex)
    if L == 0:
        return MeasurementCube(data, 0.0, plan, cfg)
    gains = np.asarray(gains, dtype=complex).reshape(N, J, L)
    m = np.arange(cfg.M)
    lam = cfg.wavelength
    refs = [np.conj(chirp_eval(k, t, cfg)) for k in plan.dss]
    for n in range(N):
        for j in range(J):
            rx = geo.rx_positions[j]
            for n2 in range(N):
                if (n2 == n and not include_self) or (n2 != n and not include_cross):
                    continue
                tx = geo.tx_positions[plan.dsa[n2]]
                for l, tg in enumerate(scene.targets):
                    amp = (cfg.P_Tx / N) * gains[n2, j, l]
                    if amp == 0:
                        continue
                    if exact_motion:
                        for mm in range(cfg.M):
                            p = tg.position + tg.velocity * mm * cfg.symbol_period
                            tau = float(bistatic_delay(p, tx, rx))
                            echo = chirp_eval(plan.dss[n2], t - tau, cfg)
                            y = _lowpass_at_samples(echo * refs[n], cfg, fs, ts)
                            data[n, j, :, mm] += amp * np.exp(-2j * np.pi * np.mod(cfg.f_c * tau, 1)) * y
                    else:
                        tau = float(bistatic_delay(tg.position, tx, rx))
                        v = float(bistatic_velocity(tg.position, tg.velocity, tx, rx))
                        echo = chirp_eval(plan.dss[n2], t - tau, cfg)
                        y = _lowpass_at_samples(echo * refs[n], cfg, fs, ts)
                        cyc = np.mod(cfg.f_c * tau + v / lam * (m * cfg.symbol_period + cfg.T_GI), 1)
                        data[n, j] += amp * np.outer(y, np.exp(-2j * np.pi * cyc))
    return MeasurementCube(data, 0.0, plan, cfg)
