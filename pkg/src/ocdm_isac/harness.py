"""Experiment configuration, seeded Monte-Carlo suites and CSV output."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .comm_ce import (assemble_fd, ber_pipeline, build_polar_dictionary, domp, generate_pilots,
                      refine_ls, sensing_enhance, simulate_pilot_rx, taps_from_fd)
from .fmcw import pair_truth, synthesize_measurements
from .metrics import MetricReport, nmse_trial, pair_crb, pair_squared_errors, target_squared_errors, to_db
from .pair_estimation import estimate_pair
from .rng import derive_rng, derive_seed
from .scene import (ArrayGeometry, GainModel, Scene, comm_channel_fd, comm_cir_taps, draw_gains,
                    random_comm_scene, random_targets)
from .vibs import vibs_pipeline
from .waveform import WaveformConfig, select_dss

SUITES = ("sensing_tmse", "vibs_mse", "comm_nmse", "ber")

CSV_COLUMNS = ("suite", "config_hash", "snr_db", "channel", "n_null", "N_CE", "waveform",
               "ce_mode", "metric", "value", "value_db", "trials", "ci_half_width")

# stream keys for counter-based seeding
_SCENE, _NOISE, _COMM_SCENE, _PILOTS, _PILOT_NOISE, _BER, _CLUSTER = range(7)

_WAVEFORM_KEYS = {"f_c": "f_c", "K": "K", "B": "B", "T_GI": "T_GI", "T_com": "T_com",
                  "f_LPF": "f_LPF", "f_ADC": "f_ADC", "M": "M"}


class ConfigError(ValueError):
    pass


def dbm_to_watt(p_dbm: float) -> float:
    return 10 ** ((p_dbm - 30) / 10)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a suite needs. Defaults are the reference system parameters.

    Powers are stored in dBm, as written in config files.
    """

    f_c: float = 30e9
    K: int = 256
    B: float = 100e6
    M: int = 64
    T_GI: float = 0.16e-6
    T_com: float = 10.9e-6
    f_LPF: float = 12.5e6
    f_ADC: float = 12.5e6
    P_Tx: float = 50.0
    P_Tx_com: float = 50.0
    N_Tx: int = 512
    N_Rx: int = 4
    N: int = 4
    D_Rx: float = 1.0
    L: int = 3
    H_max: int = 30
    H_prime_max: int = 10
    G: int = 32
    epsilon: float = 0.6
    r_range: tuple = (5.0, 10.0)
    v_max_kmh: float = 100.0
    channel: tuple = ("suc",)
    n_null: tuple = (0,)
    snr_db: tuple = (0.0, 10.0, 20.0, 30.0)
    trials: int = 500
    seed: int = 0
    suite: str = "sensing_tmse"
    out: str = "results"
    known_order: bool = False
    noiseless: bool = False
    N_CE: tuple = (128,)
    L_com: int = 3
    l_common: int = 3
    ut_range: tuple = (5.0, 10.0)
    d_min: float = 3.0
    d_max: float = 20.0
    angle_oversample: int = 2
    ce_iterations: int = 10
    n_bits: int = 102400
    beamforming: str = "wideband"
    comm_sensing: str = "vibs"
    workers: int = 1

    @property
    def waveform(self) -> WaveformConfig:
        return WaveformConfig(f_c=self.f_c, K=self.K, B=self.B, T_GI=self.T_GI, T_com=self.T_com,
                              f_LPF=self.f_LPF, f_ADC=self.f_ADC, M=self.M,
                              P_Tx=dbm_to_watt(self.P_Tx), P_Tx_com=dbm_to_watt(self.P_Tx_com))

    @property
    def geometry(self) -> ArrayGeometry:
        return _geometry(self.N_Tx, self.waveform.wavelength, self.D_Rx, self.N_Rx)

    def noise_var(self, snr_db: float, comm: bool = False) -> float:
        """sigma^2 = P / SNR, zero in noiseless mode."""
        if self.noiseless:
            return 0.0
        P = self.waveform.P_Tx_com if comm else self.waveform.P_Tx
        return P / 10 ** (snr_db / 10)

    def channels(self):
        """(kind, n_null) settings swept by the sensing suites."""
        out = []
        for kind in self.channel:
            if kind == "sns":
                out.extend(("sns", int(k)) for k in self.n_null)
            else:
                out.append((kind, 0))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self) -> str:
        """Hash of every setting that can change results (not out / workers)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# config keys accepted in files; the usual symbols are accepted verbatim
_ALIASES = {"H'_max": "H_prime_max", "ε": "epsilon", "L_comm": "l_common"}
_TUPLE_FIELDS = {"r_range", "channel", "n_null", "snr_db", "N_CE", "ut_range"}

PRESETS = {
    "desk": {"N_Tx": 128, "trials": 100, "G": 16},
}


def _coerce(name, value, default):
    if name in _TUPLE_FIELDS:
        seq = value if isinstance(value, (list, tuple)) else [value]
        if name in ("channel",):
            return tuple(str(v) for v in seq)
        if name in ("n_null", "N_CE"):
            return tuple(int(v) for v in seq)
        return tuple(float(v) for v in seq)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or float(value) != int(float(value)):
            raise TypeError(f"expected an integer, got {value!r}")
        return int(float(value))
    if isinstance(default, float):
        return float(value)
    return str(value)


def validate(ec: ExperimentConfig) -> list:
    """List of invariant violations (empty when valid)."""
    errs = []
    if not ec.snr_db:
        errs.append("snr_db: the SNR grid must be nonempty")
    if any(not np.isfinite(s) for s in ec.snr_db):
        errs.append("snr_db: values must be finite")
    if ec.trials < 1:
        errs.append("trials: must be >= 1")
    if ec.suite not in SUITES:
        errs.append(f"suite: must be one of {SUITES}")
    for k in ec.channel:
        if k not in ("correlated", "suc", "sns"):
            errs.append(f"channel: unknown kind {k!r}")
    if any(n < 0 or n > ec.N * ec.L for n in ec.n_null):
        errs.append("n_null: must lie in [0, N*L]")
    if ec.N < 1 or ec.N_Tx < ec.N:
        errs.append("N: need 1 <= N <= N_Tx")
    if ec.N_Rx != 4:
        errs.append("N_Rx: the receive layout is a 2x2 square, N_Rx must be 4")
    if ec.L < 1:
        errs.append("L: must be >= 1")
    if not 0 < ec.epsilon <= 1:
        errs.append("epsilon: must lie in (0, 1]")
    if ec.G < 2 or ec.G % 2:
        errs.append("G: must be even and >= 2")
    if not 0 <= ec.l_common <= min(ec.L, ec.L_com):
        errs.append("l_common: must lie in [0, min(L, L_com)]")
    if any(n < ec.ce_iterations for n in ec.N_CE):
        errs.append("N_CE: every value must be >= ce_iterations")
    if ec.n_bits < 1 or ec.n_bits % (4 * ec.K):
        errs.append(f"n_bits: must be a positive multiple of 4*K = {4 * ec.K}")
    if ec.beamforming not in ("wideband", "per_subcarrier"):
        errs.append("beamforming: must be 'wideband' or 'per_subcarrier'")
    if ec.comm_sensing not in ("vibs", "exact"):
        errs.append("comm_sensing: must be 'vibs' or 'exact'")
    if ec.workers < 1:
        errs.append("workers: must be >= 1")
    try:
        ec.waveform
    except ValueError as e:
        errs.append(f"waveform: {e}")
    return errs


def config_from_mapping(data: Optional[dict], preset: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a key/value mapping."""
    data = dict(data or {})
    base = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        data = {**PRESETS[preset], **data}
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f for f in base.__dataclass_fields__}
    kwargs, errs = {}, []
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            errs.append(f"{key}: unknown key")
            continue
        try:
            kwargs[name] = _coerce(name, value, getattr(base, name))
        except (TypeError, ValueError) as e:
            errs.append(f"{key}: {e}")
    if errs:
        raise ConfigError("; ".join(errs))
    ec = replace(base, **kwargs)
    errs = validate(ec)
    if errs:
        raise ConfigError("; ".join(errs))
    return ec


def load_config(path, preset: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Read a YAML key/value config. Omitted keys take the reference defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(e, 'problem', e)}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_mapping(data, preset, **overrides)


def run_header(ec: ExperimentConfig) -> dict:
    wf = ec.waveform
    return {"suite": ec.suite, "config_hash": ec.config_hash(), "seed": ec.seed,
            "Q": wf.Q, "T": wf.T, "wavelength": wf.wavelength, "mu_max": wf.mu_max,
            "P_Tx_W": wf.P_Tx, "trials": ec.trials, "snr_db": list(ec.snr_db)}


@lru_cache(maxsize=8)
def _geometry(n_tx, wavelength, d_rx, n_rx):
    return ArrayGeometry.uniform(n_tx, wavelength, d_rx)


@lru_cache(maxsize=4)
def _dictionary(n_tx, wavelength, d_rx, n_rx, f_c, d_min, d_max, oversample):
    geo = _geometry(n_tx, wavelength, d_rx, n_rx)
    return build_polar_dictionary(geo.tx_positions, f_c, d_min, d_max, oversample)


def dictionary_for(ec: ExperimentConfig):
    return _dictionary(ec.N_Tx, ec.waveform.wavelength, ec.D_Rx, ec.N_Rx, ec.f_c,
                       ec.d_min, ec.d_max, ec.angle_oversample)


# ------------------------------------------------------------------ trial kernels

def sensing_frame(ec: ExperimentConfig, trial: int, snr_idx: int, kind: str = "suc", n_null: int = 0,
                  known_order: Optional[bool] = None, estimate: bool = True):
    """One sensing frame: scene, measurements and per-pair estimates.

    The scene, DSS plan and gains depend on the trial only, so every SNR
    point and channel kind sees the same geometry. Noise is keyed on
    (trial, SNR index, n, j).

    Returns:
        dict with plan, scene, truth, cube, estimates and noise_var.
    """
    cfg = ec.waveform
    geo = ec.geometry
    rng = derive_rng(ec.seed, trial, _SCENE)
    plan = select_dss(cfg, ec.N, rng, n_tx=ec.N_Tx)
    scene = Scene(geo, random_targets(rng, ec.L, geo, cfg, r_range=ec.r_range,
                                      v_max_kmh=ec.v_max_kmh, dsa=plan.dsa))
    gains = draw_gains(GainModel(kind, n_null), ec.L, ec.N, ec.N_Rx, derive_rng(ec.seed, trial, _SCENE, 1))
    truth = pair_truth(scene, gains, plan, cfg)
    s2 = ec.noise_var(ec.snr_db[snr_idx])
    cube = synthesize_measurements(scene, gains, plan, cfg, s2, seed=derive_seed(ec.seed, trial, _NOISE, snr_idx),
                                   truth=truth)
    known = ec.known_order if known_order is None else known_order
    est = []
    if not estimate:
        return {"plan": plan, "scene": scene, "truth": truth, "cube": cube, "estimates": est, "noise_var": s2}
    for n in range(ec.N):
        for j in range(ec.N_Rx):
            L_hat = int(np.count_nonzero(truth.alpha[n, j])) if known else None
            est.append(estimate_pair(cube.data[n, j], n, j, cfg, plan, H_max=ec.H_max, L_hat=L_hat))
    return {"plan": plan, "scene": scene, "truth": truth, "cube": cube, "estimates": est, "noise_var": s2}


def sensing_tmse_trial(ec: ExperimentConfig, trial: int, snr_idx: int, kind="suc", n_null=0) -> dict:
    fr = sensing_frame(ec, trial, snr_idx, kind, n_null)
    tr, cfg, plan = fr["truth"], ec.waveform, fr["plan"]
    out = dict.fromkeys(("tmse_mu", "tmse_nu", "tmse_mu_esprit", "tmse_nu_esprit",
                         "tcrb_mu", "tcrb_nu", "missed_paths"), 0.0)
    for e in fr["estimates"]:
        n, j = e.pair
        keep = np.abs(tr.alpha[n, j]) > 0
        mu, nu = tr.mu[n, j][keep], tr.nu[n, j][keep]
        em, en, miss = pair_squared_errors(e.mu, e.nu, mu, nu)
        out["tmse_mu"] += em
        out["tmse_nu"] += en
        out["missed_paths"] += miss
        em, en, _ = pair_squared_errors(e.mu_ini, e.nu_ini, mu, nu)
        out["tmse_mu_esprit"] += em
        out["tmse_nu_esprit"] += en
        if fr["noise_var"] > 0:
            cm, cn = pair_crb(mu, nu, tr.alpha[n, j][keep], plan.dss[n], cfg, fr["noise_var"])
            out["tcrb_mu"] += cm
            out["tcrb_nu"] += cn
    return out


def vibs_trial(ec: ExperimentConfig, trial: int, snr_idx: int, kind="suc", n_null=0,
               return_targets: bool = False) -> dict:
    fr = sensing_frame(ec, trial, snr_idx, kind, n_null)
    targets, _, _ = vibs_pipeline(fr["estimates"], ec.geometry, ec.waveform, fr["plan"],
                                  seed=int(derive_rng(ec.seed, trial, _CLUSTER).integers(2 ** 31)),
                                  H_prime=ec.H_prime_max, L_hat=ec.L)
    pos = np.array([t.position for t in targets]).reshape(-1, 3)
    vel = np.array([t.velocity for t in targets]).reshape(-1, 3)
    pe, ve, miss = target_squared_errors(pos, np.nan_to_num(vel), fr["scene"].positions,
                                         fr["scene"].velocities)
    out = {"mse_position": pe, "mse_velocity": ve, "missed_targets": float(miss)}
    if return_targets:
        out["positions"] = pos
        out["scene"] = fr["scene"]
    return out


def _comm_setup(ec: ExperimentConfig, trial: int, sensed_true_positions):
    cfg = ec.waveform
    rng = derive_rng(ec.seed, trial, _COMM_SCENE)
    sc = random_comm_scene(rng, sensed_true_positions, ec.L_com, ec.l_common, ec.r_range, ec.ut_range,
                           max_delay=(ec.G - 1) / cfg.B)
    taps = comm_cir_taps(sc, ec.geometry, cfg, ec.G)
    return sc, taps


def comm_trial(ec: ExperimentConfig, trial: int, snr_idx: int, with_ber: bool = False) -> dict:
    """Channel estimation (and optionally BER) for every N_CE at one SNR point.

    With comm_sensing="vibs" the sensing frame runs at the same SNR through
    the full VIBS chain and its position estimates drive the enhancement;
    "exact" hands the true target positions to the enhancement instead.
    Pilots and pilot noise are nested across N_CE values (the first N_CE of
    the largest block), so the N_CE comparison is paired.
    """
    cfg = ec.waveform
    geo = ec.geometry
    if ec.comm_sensing == "vibs":
        sens = vibs_trial(ec, trial, snr_idx, "suc", 0, return_targets=True)
        true_pos, sensed = sens["scene"].positions, sens["positions"]
    else:
        true_pos = sensing_frame(ec, trial, snr_idx, estimate=False)["scene"].positions
        sensed = true_pos
    sc, taps = _comm_setup(ec, trial, true_pos)
    h_fd = comm_channel_fd(taps)
    D = dictionary_for(ec)
    n_max = max(ec.N_CE)
    pil = generate_pilots(n_max, ec.G, ec.N_Tx, derive_seed(ec.seed, trial, _PILOTS))
    s2 = ec.noise_var(ec.snr_db[snr_idx], comm=True)
    y_all = simulate_pilot_rx(pil, taps, cfg.P_Tx_com, s2, derive_seed(ec.seed, trial, _PILOT_NOISE, snr_idx))
    out = {}
    for n_ce in ec.N_CE:
        sub = type(pil)(pil.X[:n_ce], pil.S[:n_ce])
        fd = assemble_fd(sub, y_all[:n_ce], cfg.P_Tx_com, s2)
        ce = domp(fd, D.W, ec.ce_iterations)
        en = sensing_enhance(ce, sensed, ec.epsilon, geo.tx_positions, cfg.f_c)
        h_enh = refine_ls(en.W_sel, fd)
        out[("nmse_ini", n_ce)] = nmse_trial(ce.h_ini, h_fd)
        out[("nmse_enh", n_ce)] = nmse_trial(h_enh, h_fd)
        if with_ber and n_ce == ec.N_CE[0]:
            modes = {"perfect": None, "initial": taps_from_fd(ce.h_ini), "enhanced": taps_from_fd(h_enh)}
            for wf in ("ocdm", "ofdm"):
                for mode, est in modes.items():
                    ber, _ = ber_pipeline(taps, est, wf, ec.snr_db[snr_idx], ec.n_bits,
                                          derive_seed(ec.seed, trial, _BER, snr_idx), ec.K,
                                          cfg.P_Tx_com, ec.beamforming, noiseless=ec.noiseless)
                    out[("ber", wf, mode)] = ber
    return out


def _kernel(args):
    suite, ec_dict, trial, snr_idx, extra = args
    ec = ExperimentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in ec_dict.items()})
    with threadpool_limits(1):
        if suite == "sensing_tmse":
            return sensing_tmse_trial(ec, trial, snr_idx, *extra)
        if suite == "vibs_mse":
            return vibs_trial(ec, trial, snr_idx, *extra)
        if suite == "comm_nmse":
            return comm_trial(ec, trial, snr_idx)
        return comm_trial(ec, trial, snr_idx, with_ber=True)


def _map_trials(ec: ExperimentConfig, suite: str, snr_idx: int, extra=(), pool=None) -> list:
    jobs = [(suite, ec.to_dict(), t, snr_idx, tuple(extra)) for t in range(ec.trials)]
    if pool is None:
        return [_kernel(j) for j in jobs]
    # map preserves job order, so the reduction is independent of scheduling
    return list(pool.map(_kernel, jobs, chunksize=max(1, len(jobs) // (4 * ec.workers))))


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


class CsvSink:
    """Row writer with the shared column layout; flushes after every row."""

    def __init__(self, path, suite: str, config_hash: str):
        self.path = path
        self.suite = suite
        self.hash = config_hash
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_COLUMNS)

    def write(self, report: MetricReport, snr_db, channel="", n_null="", N_CE="", waveform="", ce_mode=""):
        vdb = to_db(report.value, -120.0) if report.value >= 0 else float("nan")
        self._w.writerow([self.suite, self.hash, _fmt(snr_db), channel, _fmt(n_null), _fmt(N_CE),
                          waveform, ce_mode, report.name, _fmt(report.value), _fmt(vdb),
                          str(report.trials), _fmt(report.ci_half_width)])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _reduce_sensing(rows: Sequence[dict]):
    """Metric reports over trials with a finite total CRB.

    Trials whose Fisher information is singular (coincident paths) have an
    infinite CRB; they are excluded from every metric and counted.
    """
    ok = [r for r in rows if np.isfinite(r["tcrb_mu"]) and np.isfinite(r["tcrb_nu"])]
    reps = []
    if ok:
        for key in ("tmse_mu", "tmse_nu", "tcrb_mu", "tcrb_nu", "tmse_mu_esprit", "tmse_nu_esprit",
                    "missed_paths"):
            reps.append(MetricReport.from_samples(key, [r[key] for r in ok]))
    reps.append(MetricReport("excluded_trials", float(len(rows) - len(ok)), max(len(rows), 1), 0.0))
    return reps


def run_experiment(ec: ExperimentConfig, out_dir=None, suite: Optional[str] = None) -> str:
    """Run one suite over the SNR grid and write its CSV.

    Rows are written as soon as an SNR point finishes, so an interrupted run
    keeps every completed point.

    Returns:
        Path of the CSV file.
    """
    suite = suite or ec.suite
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    out_dir = out_dir or ec.out
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{suite}.csv")
    pool = ProcessPoolExecutor(ec.workers) if ec.workers > 1 else None
    try:
        with CsvSink(path, suite, ec.config_hash()) as sink:
            for si, snr in enumerate(ec.snr_db):
                if suite in ("sensing_tmse", "vibs_mse"):
                    for kind, n_null in ec.channels():
                        rows = _map_trials(ec, suite, si, (kind, n_null), pool)
                        if suite == "sensing_tmse":
                            reps = _reduce_sensing(rows)
                        else:
                            reps = [MetricReport.from_samples(k, [r[k] for r in rows])
                                    for k in ("mse_position", "mse_velocity", "missed_targets")]
                        for rep in reps:
                            sink.write(rep, snr, kind, n_null)
                elif suite == "comm_nmse":
                    rows = _map_trials(ec, suite, si, (), pool)
                    for n_ce in ec.N_CE:
                        for m in ("nmse_ini", "nmse_enh"):
                            rep = MetricReport.from_samples(m, [r[(m, n_ce)] for r in rows])
                            sink.write(rep, snr, N_CE=n_ce, ce_mode=m.split("_")[1])
                else:
                    rows = _map_trials(ec, suite, si, (), pool)
                    for wf in ("ocdm", "ofdm"):
                        for mode in ("perfect", "initial", "enhanced"):
                            rep = MetricReport.from_samples("ber", [r[("ber", wf, mode)] for r in rows])
                            sink.write(rep, snr, N_CE=ec.N_CE[0], waveform=wf, ce_mode=mode)
    finally:
        if pool is not None:
            pool.shutdown()
    return path


# ------------------------------------------------------------------ plotting

_REQUIRED = {"snr_db", "metric", "value"}


def emit_plot_script(csv_paths: Sequence[str]) -> str:
    """Text of a standalone matplotlib script that plots the given CSVs.

    One panel per CSV. Curves are metric versus SNR, or versus N_CE when a
    file holds a single SNR point; BER uses a log axis, other metrics are
    drawn in dB. Output is a pure function of the inputs.

    Raises:
        FileNotFoundError: A CSV is missing.
        ValueError: A CSV lacks required columns.
    """
    paths = [str(p) for p in csv_paths]
    if not paths:
        raise ValueError("no CSV files given")
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        missing = sorted(_REQUIRED - set(header))
        if missing:
            raise ValueError(f"{p}: missing columns {', '.join(missing)}")
    lines = [
        "import csv",
        "from collections import defaultdict",
        "",
        "import matplotlib",
        "matplotlib.use('Agg')",
        "import matplotlib.pyplot as plt",
        "",
        f"CSV_FILES = {paths!r}",
        "",
        "",
        "def load(path):",
        "    with open(path, newline='', encoding='utf-8') as fh:",
        "        return list(csv.DictReader(fh))",
        "",
        "",
        "def curves(rows):",
        "    snrs = sorted({r['snr_db'] for r in rows}, key=float)",
        "    by_nce = len(snrs) == 1 and any(r.get('N_CE') for r in rows)",
        "    xkey = 'N_CE' if by_nce else 'snr_db'",
        "    out = defaultdict(list)",
        "    for r in rows:",
        "        if r['metric'] in ('excluded_trials', 'missed_paths', 'missed_targets'):",
        "            continue",
        "        parts = [r['metric']] + [r.get(k, '') for k in ('channel', 'n_null', 'waveform', 'ce_mode')]",
        "        if not by_nce and r.get('N_CE'):",
        "            parts.append('N_CE=' + r['N_CE'])",
        "        label = ' '.join(p for p in parts if p)",
        "        out[label].append((float(r[xkey]), float(r['value'])))",
        "    return xkey, {k: sorted(v) for k, v in sorted(out.items())}",
        "",
        "",
        "def main():",
        "    fig, axes = plt.subplots(1, len(CSV_FILES), figsize=(5 * len(CSV_FILES), 4), squeeze=False)",
        "    for ax, path in zip(axes[0], CSV_FILES):",
        "        rows = load(path)",
        "        xkey, cs = curves(rows)",
        "        is_ber = any(r['metric'] == 'ber' for r in rows)",
        "        for label, pts in cs.items():",
        "            x = [p[0] for p in pts]",
        "            y = [p[1] for p in pts]",
        "            if is_ber:",
        "                ax.semilogy(x, [max(v, 1e-7) for v in y], marker='o', label=label)",
        "            else:",
        "                import math",
        "                ax.plot(x, [10 * math.log10(max(v, 1e-12)) for v in y], marker='o', label=label)",
        "        ax.set_xlabel('SNR [dB]' if xkey == 'snr_db' else 'N_CE')",
        "        ax.set_ylabel('BER' if is_ber else 'value [dB]')",
        "        ax.set_title(path)",
        "        ax.grid(True, which='both', alpha=0.3)",
        "        ax.legend(fontsize=7)",
        "    fig.tight_layout()",
        "    fig.savefig('figures.png', dpi=150)",
        "",
        "",
        "if __name__ == '__main__':",
        "    main()",
        "",
    ]
    return "\n".join(lines)
