"""Array geometry, targets, scatterers and channel gain models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .waveform import SPEED_OF_LIGHT, WaveformConfig

_COINCIDENT = 1e-12


def _vec3(p, name="point"):
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be a finite 3-vector")
    return p


def _points(p, name):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.ndim != 2 or p.shape[1] != 3 or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be an (n, 3) array of finite coordinates")
    return p


@dataclass(frozen=True)
class ArrayGeometry:
    """Transmit and receive antenna coordinates on the z = 0 plane.

    Attributes:
        tx_positions: (N_Tx, 3) array [m].
        rx_positions: (N_Rx, 3) array [m].
    """

    tx_positions: np.ndarray
    rx_positions: np.ndarray

    def __post_init__(self):
        tx = _points(self.tx_positions, "tx_positions")
        rx = _points(self.rx_positions, "rx_positions")
        if np.any(tx[:, 2] != 0) or np.any(rx[:, 2] != 0):
            raise ValueError("all antennas must lie on the z = 0 plane")
        tx.setflags(write=False)
        rx.setflags(write=False)
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "rx_positions", rx)

    @property
    def n_tx(self) -> int:
        return self.tx_positions.shape[0]

    @property
    def n_rx(self) -> int:
        return self.rx_positions.shape[0]

    @classmethod
    def uniform(cls, n_tx: int = 512, wavelength: float = 0.01, d_rx: float = 1.0):
        """Half-wavelength ULA along x plus a square of four Rx antennas.

        Tx antenna i sits at (i * wavelength / 2, 0, 0); the Rx antennas sit at
        (+-d_rx / 2, +-d_rx / 2, 0).
        """
        tx = np.zeros((n_tx, 3))
        tx[:, 0] = np.arange(n_tx) * wavelength / 2
        h = d_rx / 2
        rx = np.array([[h, h, 0.0], [h, -h, 0.0], [-h, h, 0.0], [-h, -h, 0.0]])
        return cls(tx, rx)


@dataclass(frozen=True)
class Target:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        p = _vec3(self.position, "position")
        v = _vec3(self.velocity, "velocity")
        if p[2] <= 0:
            raise ValueError("targets must have z > 0")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)


@dataclass(frozen=True)
class Scene:
    geometry: ArrayGeometry
    targets: tuple = ()

    @property
    def L(self) -> int:
        return len(self.targets)

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position for t in self.targets]).reshape(-1, 3)

    @property
    def velocities(self) -> np.ndarray:
        return np.array([t.velocity for t in self.targets]).reshape(-1, 3)


@dataclass(frozen=True)
class GainModel:
    """Sensing gain model: 'correlated', 'suc' or 'sns' (with n_null nulled paths)."""

    kind: str = "suc"
    n_null: int = 0

    def __post_init__(self):
        if self.kind not in ("correlated", "suc", "sns"):
            raise ValueError(f"unknown gain model {self.kind!r}")
        if self.n_null < 0:
            raise ValueError("n_null must be non-negative")


@dataclass(frozen=True)
class CommScene:
    """Downlink scatterers, user terminal and path gains.

    Attributes:
        scatterer_positions: (L_com, 3) array [m].
        ut_position: User terminal position [m].
        gains: (L_com,) complex path gains.
        l_common: How many leading scatterers coincide with sensing targets.
    """

    scatterer_positions: np.ndarray
    ut_position: np.ndarray
    gains: np.ndarray
    l_common: int = 0

    def __post_init__(self):
        sp = np.asarray(self.scatterer_positions, dtype=float).reshape(-1, 3)
        g = np.asarray(self.gains, dtype=complex).reshape(-1)
        if g.size != sp.shape[0]:
            raise ValueError("one gain per scatterer required")
        if not 0 <= self.l_common <= sp.shape[0]:
            raise ValueError("l_common must lie in [0, L_com]")
        object.__setattr__(self, "scatterer_positions", sp)
        object.__setattr__(self, "ut_position", _vec3(self.ut_position, "ut_position"))
        object.__setattr__(self, "gains", g)

    @property
    def L_com(self) -> int:
        return self.scatterer_positions.shape[0]


def _dist(a, b):
    d = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), axis=-1)
    if np.any(d < _COINCIDENT):
        raise ValueError("point coincides with an antenna")
    return d


def bistatic_delay(target_pos, tx, rx) -> np.ndarray:
    """Bistatic propagation delay (|p - tx| + |p - rx|) / c [s]. Broadcasts."""
    return (_dist(target_pos, tx) + _dist(target_pos, rx)) / SPEED_OF_LIGHT


def bistatic_velocity(target_pos, target_vel, tx, rx) -> np.ndarray:
    """Bistatic range rate [m/s], the projection of v onto u_tx + u_rx."""
    p = np.asarray(target_pos, dtype=float)
    u_t = (p - tx) / _dist(p, tx)[..., None]
    u_r = (p - rx) / _dist(p, rx)[..., None]
    return np.sum((u_t + u_r) * np.asarray(target_vel, dtype=float), axis=-1)


def draw_gains(model: GainModel, L: int, N: int, N_Rx: int, seed=None) -> np.ndarray:
    """Draw the (N, N_Rx, L) complex sensing gains for the DSA/Rx/target paths."""
    rng = np.random.default_rng(seed)

    def cn(shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)

    if model.kind == "correlated":
        return np.broadcast_to(cn(L), (N, N_Rx, L)).copy()
    g = cn((N, N_Rx, L))
    if model.kind == "sns":
        if model.n_null > N * L:
            raise ValueError(f"n_null ({model.n_null}) exceeds N*L ({N * L})")
        idx = rng.choice(N * L, size=model.n_null, replace=False)
        n_idx, l_idx = np.unravel_index(idx, (N, L))
        g[n_idx, :, l_idx] = 0
    return g


def near_field_steering(point, tx_positions, f_c: float) -> np.ndarray:
    """Unit-norm spherical-wavefront steering vector toward point."""
    p = _vec3(point)
    tx = _points(tx_positions, "tx_positions")
    d = _dist(p, tx)
    ph = -f_c * (d - np.linalg.norm(p)) / SPEED_OF_LIGHT
    ph = ph - np.round(ph)
    return np.exp(2j * np.pi * ph) / np.sqrt(tx.shape[0])


def pulse_shape(x, B: float):
    """Sinc pulse band-limited to the signal bandwidth."""
    return np.sinc(B * np.asarray(x, dtype=float))


def comm_path_delays(scene: CommScene) -> np.ndarray:
    """Per-scatterer delays from the array reference (origin) via p_l to the UT."""
    sp = scene.scatterer_positions
    return (np.linalg.norm(sp, axis=1)
            + np.linalg.norm(sp - scene.ut_position, axis=1)) / SPEED_OF_LIGHT


def comm_cir_taps(scene: CommScene, geometry: ArrayGeometry, cfg: WaveformConfig, G: int) -> np.ndarray:
    """Sampled channel impulse response, shape (G, N_Tx).

    Sampling period T_s = 1 / B. Delays must satisfy tau <= (G - 1) T_s.
    """
    Ts = 1.0 / cfg.B
    taps = np.zeros((G, geometry.n_tx), dtype=complex)
    if scene.L_com == 0:
        return taps
    tau = comm_path_delays(scene)
    if np.any(tau > (G - 1) * Ts * (1 + 1e-12)):
        raise ValueError(f"path delay {tau.max():.3e} s exceeds the {G}-tap window")
    g = np.arange(G) * Ts
    for l in range(scene.L_com):
        a = near_field_steering(scene.scatterer_positions[l], geometry.tx_positions, cfg.f_c)
        taps += scene.gains[l] * pulse_shape(g - tau[l], cfg.B)[:, None] * a[None, :]
    return taps


def comm_channel_fd(taps) -> np.ndarray:
    """Frequency-domain channel vectors via the unitary DFT along the tap axis."""
    return np.fft.fft(np.asarray(taps, dtype=complex), axis=0, norm="ortho")


def spherical_to_cartesian(r, theta, phi):
    r, theta, phi = map(np.asarray, (r, theta, phi))
    return np.stack([r * np.sin(theta) * np.cos(phi),
                     r * np.sin(theta) * np.sin(phi),
                     r * np.cos(theta)], axis=-1)


def random_targets(rng, L: int, geometry: ArrayGeometry, cfg: WaveformConfig,
                   r_range=(5.0, 10.0), v_max_kmh: float = 100.0, dsa=None,
                   max_tries: int = 1000) -> tuple:
    """Draw L targets from the reference distributions.

    Positions are r ~ U(r_range), theta ~ U(0, pi/2), phi ~ U(0, 2 pi); each
    velocity component is U(0, v_max) km/h. Targets whose bistatic delay to any
    (DSA, Rx) pair reaches the guard interval are redrawn.
    """
    rng = np.random.default_rng(rng)
    tx = geometry.tx_positions if dsa is None else geometry.tx_positions[list(dsa)]
    out = []
    for _ in range(L):
        for _ in range(max_tries):
            r = rng.uniform(*r_range)
            th = rng.uniform(0, np.pi / 2)
            ph = rng.uniform(0, 2 * np.pi)
            p = spherical_to_cartesian(r, th, ph)
            v = rng.uniform(0, v_max_kmh, 3) / 3.6
            if p[2] <= 0:
                continue
            tau = bistatic_delay(p, tx[:, None, :], geometry.rx_positions[None, :, :])
            if np.all(tau < cfg.T_GI):
                out.append(Target(p, v))
                break
        else:
            raise RuntimeError("could not draw a target inside the guard-interval range")
    return tuple(out)


def random_comm_scene(rng, sensing_positions, L_com: int, l_common: int,
                      r_range=(5.0, 10.0), ut_range=(5.0, 10.0), max_delay=None,
                      max_tries: int = 1000) -> CommScene:
    """Draw a downlink scene that reuses the first l_common sensing targets."""
    rng = np.random.default_rng(rng)
    sensing_positions = np.asarray(sensing_positions, dtype=float).reshape(-1, 3)
    if l_common > min(len(sensing_positions), L_com):
        raise ValueError("l_common exceeds the available targets or scatterers")

    def draw_point(rr):
        return spherical_to_cartesian(rng.uniform(*rr), rng.uniform(0, np.pi / 2),
                                      rng.uniform(0, 2 * np.pi))

    for _ in range(max_tries):
        ut = draw_point(ut_range)
        pts = [sensing_positions[i] for i in range(l_common)]
        pts += [draw_point(r_range) for _ in range(L_com - l_common)]
        pts = np.array(pts).reshape(-1, 3)
        gains = (rng.standard_normal(L_com) + 1j * rng.standard_normal(L_com)) / np.sqrt(2)
        sc = CommScene(pts, ut, gains, l_common)
        if max_delay is None or L_com == 0 or comm_path_delays(sc).max() <= max_delay:
            return sc
    raise RuntimeError("could not draw a communication scene within the delay window")
