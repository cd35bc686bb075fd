"""OCDM chirp subcarriers, the discrete Fresnel transform and DSS selection.

Times are handled internally in units of the symbol duration (x = t / T) so
that the quadratic chirp phases stay well conditioned for GHz-scale carriers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299792458.0

VARIANTS = ("plain", "folded", "permuted")


@dataclass(frozen=True)
class WaveformConfig:
    """Carrier, bandwidth and timing parameters of the OCDM sensing frame.

    The defaults reproduce the reference system (30 GHz carrier, 256 chirps
    over 100 MHz, 64 sensing symbols, 50 dBm transmit power).

    Attributes:
        f_c: Carrier frequency [Hz].
        K: Number of chirp subcarriers (even).
        B: Bandwidth [Hz].
        T_GI: Guard interval [s].
        T_com: Communication stage between two sensing symbols [s].
        f_LPF: Low-pass cutoff of the dechirp receiver [Hz].
        f_ADC: ADC sampling rate [Hz].
        M: Number of sensing symbols.
        P_Tx: Sensing transmit power [W].
        P_Tx_com: Communication transmit power [W].
    """

    f_c: float = 30e9
    K: int = 256
    B: float = 100e6
    T_GI: float = 0.16e-6
    T_com: float = 10.9e-6
    f_LPF: float = 12.5e6
    f_ADC: float = 12.5e6
    M: int = 64
    P_Tx: float = 100.0
    P_Tx_com: float = 100.0

    def __post_init__(self):
        errs = []
        if int(self.K) != self.K or self.K < 2 or self.K % 2:
            errs.append(f"K must be an even integer >= 2, got {self.K}")
        if int(self.M) != self.M or self.M < 1:
            errs.append(f"M must be a positive integer, got {self.M}")
        for name in ("f_c", "B", "f_LPF", "f_ADC"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                errs.append(f"{name} must be positive and finite, got {v}")
        if self.T_GI < 0 or self.T_com < 0:
            errs.append("T_GI and T_com must be non-negative")
        if self.P_Tx < 0 or self.P_Tx_com < 0:
            errs.append("transmit powers must be non-negative")
        if not errs:
            if self.f_ADC < self.f_LPF:
                errs.append(f"f_ADC ({self.f_ADC}) must be >= f_LPF ({self.f_LPF})")
            if self.T_GI >= self.T:
                errs.append(f"T_GI ({self.T_GI}) must be shorter than T ({self.T})")
            elif self.Q < 1:
                errs.append("f_ADC * (T - T_GI) must allow at least one sample")
        if errs:
            raise ValueError("; ".join(errs))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "M", int(self.M))

    @property
    def T(self) -> float:
        """Symbol duration K / B."""
        return self.K / self.B

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def Q(self) -> int:
        """Samples per symbol after the guard interval."""
        # the product is an integer for the reference numbers; guard float error
        return int(np.floor(self.f_ADC * (self.T - self.T_GI) + 1e-9))

    @property
    def sample_times(self) -> np.ndarray:
        """ADC instants within one symbol, T_GI + q / f_ADC for q = 0..Q-1."""
        return self.T_GI + np.arange(self.Q) / self.f_ADC

    @property
    def mu_max(self) -> float:
        """Largest normalized delay that stays inside the guard interval."""
        return self.B * self.T_GI / (self.f_ADC * self.T)

    @property
    def symbol_period(self) -> float:
        """Spacing between consecutive sensing symbols, T + T_GI + T_com."""
        return self.T + self.T_GI + self.T_com

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DssPlan:
    """One-to-one pairing of dedicated sensing subcarriers and antennas.

    Attributes:
        dss: Subcarrier index k_n of each DSS, in [0, K).
        dsa: Zero-based transmit-antenna index i_n paired with each DSS.
    """

    dss: tuple = field(default_factory=tuple)
    dsa: tuple = field(default_factory=tuple)

    def __post_init__(self):
        dss = tuple(int(k) for k in self.dss)
        dsa = tuple(int(i) for i in self.dsa)
        if len(dss) != len(dsa):
            raise ValueError("dss and dsa must have the same length")
        if len(set(dss)) != len(dss) or len(set(dsa)) != len(dsa):
            raise ValueError("dss and dsa indices must be distinct")
        if any(i < 0 for i in dsa):
            raise ValueError("antenna indices must be non-negative")
        object.__setattr__(self, "dss", dss)
        object.__setattr__(self, "dsa", dsa)

    @property
    def N(self) -> int:
        return len(self.dss)

    def to_dict(self) -> dict:
        return {"dss": list(self.dss), "dsa": list(self.dsa)}


def _check_k(k, K):
    k = np.asarray(k)
    if not np.issubdtype(k.dtype, np.integer):
        if not np.all(np.equal(np.mod(k, 1), 0)):
            raise ValueError("subcarrier index must be an integer")
        k = k.astype(int)
    if np.any((k < 0) | (k >= K)):
        raise ValueError(f"subcarrier index must lie in [0, {K}), got {k}")
    return k


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown chirp variant {variant!r}, expected one of {VARIANTS}")


def _wrap_offset(k, K, variant):
    # index a in [0, K) such that the normalized frequency is <a - K x>_K - K/2
    return (k + K // 2) % K if variant == "folded" else k % K


def _phase_cycles(k, x, K, variant):
    """Chirp phase in cycles at normalized time x in [0, 1).

    Includes the constant term and excludes the pi/4 prefactor.
    """
    if variant == "plain":
        return -0.5 * K * (x - k / K) ** 2
    a = _wrap_offset(k, K, variant)
    # closed-form integral of the sawtooth frequency, one wrap at x = a / K
    integ = (a - K / 2) * x - 0.5 * K * x ** 2 + K * np.maximum(0.0, x - a / K)
    if variant == "folded":
        const = -(k ** 2) / (2.0 * K)
    else:
        const = -(((k - K // 2) % K) ** 2) / (2.0 * K)
    return integ + const


def chirp_eval(k, t, cfg: WaveformConfig, variant: str = "permuted") -> np.ndarray:
    """Evaluate an OCDM chirp subcarrier.

    Args:
        k: Subcarrier index (scalar or array broadcastable with t).
        t: Time instant(s) [s] relative to the symbol start.
        cfg: Waveform configuration.
        variant: "plain", "folded" (spectrum folded) or "permuted"
            (folded with the K/2 index permutation).

    Returns:
        Complex amplitude(s), zero outside [0, T).
    """
    _check_variant(variant)
    k = _check_k(k, cfg.K)
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("time must be finite")
    x = t / cfg.T
    inside = (x >= 0) & (x < 1)
    xc = np.where(inside, x, 0.0)
    cyc = _phase_cycles(k, xc, cfg.K, variant)
    # reduce before scaling by 2 pi to keep the argument small
    cyc = cyc - np.round(cyc)
    val = np.exp(1j * np.pi / 4) * np.exp(2j * np.pi * cyc)
    return np.where(inside, val, 0.0)


def instantaneous_frequency(k, t, cfg: WaveformConfig, variant: str = "permuted") -> np.ndarray:
    """Instantaneous frequency [Hz] of a folded or permuted chirp, in [-B/2, B/2)."""
    if variant not in ("folded", "permuted"):
        raise ValueError("instantaneous_frequency supports 'folded' and 'permuted'")
    k = _check_k(k, cfg.K)
    t = np.asarray(t, dtype=float)
    x = t / cfg.T
    if np.any((x < 0) | (x >= 1)) or not np.all(np.isfinite(x)):
        raise ValueError("time must lie in [0, T)")
    K = cfg.K
    a = _wrap_offset(k, K, variant)
    u = np.mod(a - K * x, K)
    # snap tiny negatives from rounding so the wrap lands at exactly x = a / K
    u = np.where(u >= K - 1e-9 * K, 0.0, u)
    return (u - K / 2) / cfg.T


def dfnt_matrix(G: int) -> np.ndarray:
    """Discrete Fresnel transform matrix of even order G (unitary)."""
    if int(G) != G or G < 1:
        raise ValueError(f"order must be a positive integer, got {G}")
    G = int(G)
    if G % 2:
        raise ValueError(f"odd DFnT order {G} is not supported")
    i = np.arange(G)
    d = i[:, None] - i[None, :]
    # (i - j)^2 / G mod 2 keeps the exponent small for large G
    e = np.mod(d.astype(np.int64) ** 2, 2 * G) / G
    return np.exp(-1j * np.pi / 4) * np.exp(1j * np.pi * e) / np.sqrt(G)


def dss_spacing_bounds(cfg: WaveformConfig):
    """Lower and upper bound on |k_n' - k_n| that keep DSS echoes separable."""
    lower = cfg.B * cfg.T_GI + cfg.f_LPF * cfg.T
    upper = cfg.K - lower
    return lower, upper


def dss_candidates(cfg: WaveformConfig) -> np.ndarray:
    """Lattice of subcarrier indices spaced by the minimum admissible gap.

    Starting from 0, indices are placed at the smallest integer spacing that
    satisfies the lower bound, as long as the total span stays within the
    upper bound. Any N-subset of this lattice is a valid DSS set, and no valid
    set has more elements than the lattice.
    """
    lower, upper = dss_spacing_bounds(cfg)
    step = int(np.ceil(lower - 1e-9))
    step = max(step, 1)
    if upper < step:
        return np.array([0])
    span = min(np.floor(upper + 1e-9), cfg.K - 1)
    return np.arange(0, int(span) + 1, step)


def is_dss_feasible(dss: Sequence[int], cfg: WaveformConfig) -> bool:
    lower, upper = dss_spacing_bounds(cfg)
    tol = 1e-9
    for a, b in combinations(dss, 2):
        d = abs(int(a) - int(b))
        if d < lower - tol or d > upper + tol:
            return False
    return True


def default_dsa(N: int, n_tx: int) -> tuple:
    """Evenly spread DSA indices across the transmit array."""
    if N > n_tx:
        raise ValueError(f"cannot pick {N} DSAs from {n_tx} antennas")
    if N == 1:
        return (0,)
    return tuple(int(i) for i in np.round(np.linspace(0, n_tx - 1, N)).astype(int))


def select_dss(cfg: WaveformConfig, N: int, seed=None, n_tx: Optional[int] = None,
               dsa: Optional[Sequence[int]] = None) -> DssPlan:
    """Randomly pick N dedicated sensing subcarriers satisfying the spacing rule.

    Args:
        cfg: Waveform configuration.
        N: Number of DSS (and DSA).
        seed: Seed or numpy Generator.
        n_tx: Number of transmit antennas; used for the default DSA spread.
        dsa: Explicit DSA indices, overrides the default spread.

    Raises:
        ValueError: when no N indices satisfy the spacing bounds.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng(seed)
    lower, upper = dss_spacing_bounds(cfg)
    if N == 1:
        dss = (int(rng.integers(cfg.K)),)
    else:
        cand = dss_candidates(cfg)
        if N > cand.size:
            raise ValueError(
                f"infeasible DSS set: at most {cand.size} subcarriers can be spaced by "
                f">= {lower:g} (lower bound) with span <= {upper:g} (upper bound), asked for {N}")
        dss = tuple(int(k) for k in np.sort(rng.choice(cand, size=N, replace=False)))
    if dsa is None:
        dsa = default_dsa(N, n_tx if n_tx is not None else N)
    return DssPlan(dss=dss, dsa=tuple(dsa))


@dataclass(frozen=True)
class CriterionResult:
    ok: bool
    violation: Optional[tuple] = None  # (n, n', tau, condition)

    def __bool__(self):
        return self.ok


def validate_criterion(plan: DssPlan, cfg: WaveformConfig, n_tau: int = 4096) -> CriterionResult:
    """Check the LPF separation conditions on a uniform delay grid on [0, T_GI).

    For every pair n != n' the self beat Btau/T must pass the LPF while the
    cross beat and its images at +-B must be rejected.
    """
    tau = np.arange(n_tau) * (cfg.T_GI / n_tau)
    f1 = cfg.B * tau / cfg.T
    if np.any(np.abs(f1) >= cfg.f_LPF):
        bad = int(np.argmax(np.abs(f1) >= cfg.f_LPF))
        return CriterionResult(False, (0, 0, float(tau[bad]), "self beat outside passband"))
    for n, kn in enumerate(plan.dss):
        for n2, kn2 in enumerate(plan.dss):
            if n == n2:
                continue
            f2 = f1 + (kn2 - kn) / cfg.T
            for cond, f in (("cross beat", f2), ("cross image -B", f2 - cfg.B),
                            ("cross image +B", f2 + cfg.B)):
                bad = np.abs(f) <= cfg.f_LPF
                if np.any(bad):
                    i = int(np.argmax(bad))
                    return CriterionResult(False, (n, n2, float(tau[i]), cond))
    return CriterionResult(True, None)
