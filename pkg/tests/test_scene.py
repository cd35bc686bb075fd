import numpy as np
import pytest

from ocdm_isac.scene import (ArrayGeometry, CommScene, GainModel, bistatic_delay, bistatic_velocity,
                             comm_channel_fd, comm_cir_taps, draw_gains, near_field_steering,
                             random_comm_scene, random_targets)
from ocdm_isac.waveform import SPEED_OF_LIGHT

C = SPEED_OF_LIGHT


class TestBistatic:
    def test_monostatic(self):
        assert bistatic_delay([0, 0, 7], [0, 0, 0], [0, 0, 0]) == pytest.approx(14 / C, rel=1e-15)

    def test_exact_value(self):
        tau = bistatic_delay([0, 0, 7], [0, 0, 0], [0.5, 0.5, 0])
        assert tau == pytest.approx((7 + np.sqrt(49.5)) / C, rel=1e-15)
        # (7 + sqrt(49.5)) / c evaluates to 46.82 ns
        assert tau == pytest.approx(46.82e-9, abs=0.01e-9)

    def test_homogeneous(self, rng):
        p, a, b = rng.normal(size=(3, 3))
        assert bistatic_delay(2 * p, 2 * a, 2 * b) == pytest.approx(2 * bistatic_delay(p, a, b), rel=1e-14)

    def test_coincident_rejected(self):
        with pytest.raises(ValueError):
            bistatic_delay([1, 1, 0], [1, 1, 0], [0, 0, 0])

    def test_velocity_orthogonal(self):
        # target on z axis, tx = rx = origin, motion along x
        assert bistatic_velocity([0, 0, 5], [3, 0, 0], [0, 0, 0], [0, 0, 0]) == pytest.approx(0, abs=1e-15)

    def test_velocity_monostatic_radial(self):
        p = np.array([1.0, 2.0, 3.0])
        u = p / np.linalg.norm(p)
        assert bistatic_velocity(p, 4 * u, [0, 0, 0], [0, 0, 0]) == pytest.approx(8.0, rel=1e-14)

    def test_velocity_finite_difference(self, rng):
        h = 1e-6
        for _ in range(20):
            p = rng.uniform(-3, 3, 3) + [0, 0, 6]
            v = rng.uniform(-30, 30, 3)
            tx, rx = rng.uniform(-1, 1, 3) * [1, 1, 0], rng.uniform(-1, 1, 3) * [1, 1, 0]
            fd = C * (bistatic_delay(p + v * h, tx, rx) - bistatic_delay(p - v * h, tx, rx)) / (2 * h)
            assert bistatic_velocity(p, v, tx, rx) == pytest.approx(fd, rel=1e-6)


class TestGains:
    def test_correlated_replicated(self):
        g = draw_gains(GainModel("correlated"), 1, 4, 4, seed=1)
        assert np.all(g == g[0, 0, 0])

    def test_sns_all_null(self):
        g = draw_gains(GainModel("sns", 12), 3, 4, 4, seed=1)
        assert np.all(g == 0)

    def test_sns_paths_shared_over_rx(self):
        g = draw_gains(GainModel("sns", 2), 3, 4, 4, seed=7)
        zero = np.all(g == 0, axis=1)
        assert zero.sum() == 2
        assert np.count_nonzero(g == 0) == 2 * 4

    def test_suc_variance(self):
        g = draw_gains(GainModel("suc"), 625, 4, 4, seed=2)
        assert g.size == 10_000
        assert abs(np.mean(np.abs(g) ** 2) - 1) < 0.05

    def test_bad_model(self):
        with pytest.raises(ValueError):
            GainModel("rician")
        with pytest.raises(ValueError):
            draw_gains(GainModel("sns", 13), 3, 4, 4)


class TestSteering:
    def test_single_antenna(self):
        assert near_field_steering([0, 0, 5], np.zeros((1, 3)), 30e9)[0] == pytest.approx(1.0)

    def test_unit_norm(self, geometry, rng):
        a = near_field_steering(rng.uniform(1, 5, 3), geometry.tx_positions, 30e9)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)

    def test_far_field_limit(self):
        lam = C / 30e9
        tx = np.zeros((32, 3))
        tx[:, 0] = np.arange(32) * lam / 2
        aperture = 31 * lam / 2
        u = np.array([np.sin(0.4), 0.0, np.cos(0.4)])
        devs = []
        for scale in (10, 100, 1000):
            a = near_field_steering(scale * aperture * u, tx, 30e9)
            plane = np.exp(2j * np.pi * tx[:, 0] * u[0] / lam) / np.sqrt(32)
            devs.append(np.max(np.abs(np.angle(a / plane))))
        assert devs[0] > devs[1] > devs[2]
        # residual curvature phase falls off as 1/r
        assert devs[2] < devs[0] / 50

    def test_coincident(self, geometry):
        with pytest.raises(ValueError):
            near_field_steering(geometry.tx_positions[3], geometry.tx_positions, 30e9)


class TestCommChannel:
    def test_on_grid_single_tap(self, cfg):
        geo = ArrayGeometry.uniform(8, cfg.wavelength)
        # choose the UT so that the path length is exactly 3 samples
        d = 3 * C / cfg.B
        sc = CommScene(np.array([[0.0, 0.0, d / 2]]), np.array([0.0, 0.0, 0.0 + 1e-9]), np.array([0.7 + 0.2j]))
        taps = comm_cir_taps(sc, geo, cfg, 8)
        a = near_field_steering(sc.scatterer_positions[0], geo.tx_positions, cfg.f_c)
        assert np.allclose(taps[3], (0.7 + 0.2j) * a, atol=1e-6)
        others = np.delete(taps, 3, axis=0)
        assert np.max(np.abs(others)) < 1e-6

    def test_empty_scene(self, cfg):
        geo = ArrayGeometry.uniform(8, cfg.wavelength)
        sc = CommScene(np.zeros((0, 3)), np.array([0, 0, 5.0]), np.zeros(0, complex))
        assert np.all(comm_cir_taps(sc, geo, cfg, 4) == 0)

    def test_loop_oracle(self, cfg, rng):
        geo = ArrayGeometry.uniform(6, cfg.wavelength)
        sc = CommScene(np.array([[1.0, 2.0, 5.0], [-2.0, 0.5, 6.0]]), np.array([0.3, -4.0, 3.0]),
                       np.array([0.5 - 1j, 1.2 + 0.3j]))
        G = 16
        taps = comm_cir_taps(sc, geo, cfg, G)
        for g in range(G):
            for i in range(geo.n_tx):
                want = 0
                for l in range(2):
                    p = sc.scatterer_positions[l]
                    tau = (np.linalg.norm(p) + np.linalg.norm(p - sc.ut_position)) / C
                    dist = np.linalg.norm(p - geo.tx_positions[i])
                    a = np.exp(-2j * np.pi * cfg.f_c * (dist - np.linalg.norm(p)) / C) / np.sqrt(geo.n_tx)
                    want += sc.gains[l] * a * np.sinc(cfg.B * (g / cfg.B - tau))
                assert abs(taps[g, i] - want) < 1e-9

    def test_delay_beyond_window(self, cfg):
        geo = ArrayGeometry.uniform(4, cfg.wavelength)
        sc = CommScene(np.array([[0, 0, 30.0]]), np.array([0, 0, 1.0]), np.array([1.0 + 0j]))
        with pytest.raises(ValueError):
            comm_cir_taps(sc, geo, cfg, 8)

    def test_fd_impulse_and_parseval(self, rng):
        taps = np.zeros((8, 3), complex)
        taps[0] = [1, 2j, -1]
        fd = comm_channel_fd(taps)
        assert np.allclose(fd, taps[0] / np.sqrt(8), atol=1e-15)
        taps = rng.normal(size=(16, 5)) + 1j * rng.normal(size=(16, 5))
        fd = comm_channel_fd(taps)
        assert np.sum(np.abs(fd) ** 2) == pytest.approx(np.sum(np.abs(taps) ** 2), rel=1e-10)
        assert np.max(np.abs(np.fft.ifft(fd, axis=0, norm="ortho") - taps)) < 1e-12


class TestRandomScenes:
    def test_targets_within_guard(self, cfg, geometry):
        r = np.random.default_rng(0)
        for _ in range(20):
            for t in random_targets(r, 3, geometry, cfg):
                assert t.position[2] > 0
                assert 5 <= np.linalg.norm(t.position) <= 10
                assert np.all((t.velocity >= 0) & (t.velocity <= 100 / 3.6))
                tau = bistatic_delay(t.position, geometry.tx_positions[:, None], geometry.rx_positions[None])
                assert np.all(tau < cfg.T_GI)

    def test_common_scatterers(self):
        pos = np.array([[1, 2, 6.0], [2, 1, 7.0], [0, 0, 8.0]])
        sc = random_comm_scene(np.random.default_rng(1), pos, 3, 2)
        assert np.allclose(sc.scatterer_positions[:2], pos[:2])
        assert not np.allclose(sc.scatterer_positions[2], pos[2])
        with pytest.raises(ValueError):
            random_comm_scene(np.random.default_rng(1), pos, 2, 3)

    def test_geometry_plane(self):
        with pytest.raises(ValueError):
            ArrayGeometry(np.array([[0, 0, 0.1]]), np.zeros((4, 3)))
