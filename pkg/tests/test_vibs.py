import numpy as np
import pytest

from ocdm_isac.fmcw import pair_truth
from ocdm_isac.pair_estimation import PairEstimate
from ocdm_isac.scene import bistatic_delay, bistatic_velocity
from ocdm_isac.vibs import (BistaticMeasurements, VirtualBistaticSensing, closed_form_position,
                            cluster_measurements, eliminate_outliers, from_physical, locate_cluster,
                            position_gda, position_gradient, position_objective, to_physical,
                            velocity_ls, vibs_pipeline, write_target_csv)
from ocdm_isac.waveform import SPEED_OF_LIGHT

from conftest import make_scene


def measurements(p, v, tx, rx):
    tx, rx = np.atleast_2d(tx).astype(float), np.atleast_2d(rx).astype(float)
    tx, rx = np.broadcast_arrays(tx, rx)
    d = SPEED_OF_LIGHT * bistatic_delay(p, tx, rx)
    vv = bistatic_velocity(p, v, tx, rx)
    n = len(d)
    return BistaticMeasurements(d, vv, tx, rx, np.zeros(n), np.arange(n))


RING = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0]])


class TestScaling:
    def test_zero(self, cfg):
        assert to_physical(0.0, 0.0, cfg)[0] == 0

    def test_half(self, cfg):
        d, _ = to_physical(0.5, 0.0, cfg)
        assert d == pytest.approx(SPEED_OF_LIGHT * cfg.T_GI, rel=1e-12)
        assert d == pytest.approx(47.97, abs=0.01)

    def test_roundtrip(self, cfg, rng):
        mu, nu = rng.uniform(0, 0.5, 10), rng.uniform(-0.5, 0.5, 10)
        m2, n2 = from_physical(*to_physical(mu, nu, cfg), cfg)
        assert np.max(np.abs(m2 - mu)) < 1e-12 and np.max(np.abs(n2 - nu)) < 1e-12


class TestOutliers:
    def cloud(self, rng, n=30):
        # jittered 6x5 lattice: compact, no isolated points
        gd, gv = np.meshgrid(np.arange(6), np.arange(5))
        d = 10 + 0.1 * gd.ravel() + rng.uniform(-0.02, 0.02, n)
        v = 5 + 0.1 * gv.ravel() + rng.uniform(-0.02, 0.02, n)
        z = np.zeros((n, 3))
        return BistaticMeasurements(d, v, z, z, np.zeros(n), np.zeros(n))

    def test_clean_unchanged(self, rng):
        m = self.cloud(rng)
        out, keep = eliminate_outliers(m)
        assert len(out) == len(m) and keep.tolist() == list(range(len(m)))

    def test_single_injected(self, rng):
        m = self.cloud(rng)
        d = m.d.copy()
        spread = np.ptp(d)
        d[7] = np.median(d) + 10 * spread
        m = BistaticMeasurements(d, m.v, m.tx_pos, m.rx_pos, m.tx_idx, m.rx_idx)
        _, keep = eliminate_outliers(m)
        assert keep.tolist() == [i for i in range(len(d)) if i != 7]

    def test_spread_target_kept(self, rng):
        # two compact targets next to one whose ranges spread over three metres: nothing is an outlier
        d = np.r_[rng.uniform(16.58, 16.93, 12), rng.uniform(15.6, 17.1, 16), rng.uniform(10.1, 13.1, 12)]
        v = np.r_[rng.uniform(7.5, 10.2, 12), rng.uniform(-28.4, -24.8, 16), rng.uniform(-8.6, -4.3, 12)]
        z = np.zeros((40, 3))
        m = BistaticMeasurements(d, v, z, z, np.zeros(40), np.zeros(40))
        assert len(eliminate_outliers(m)[0]) == 40

    def test_identical_points(self):
        z = np.zeros((6, 3))
        m = BistaticMeasurements(np.full(6, 3.0), np.full(6, 1.0), z, z, np.zeros(6), np.zeros(6))
        assert len(eliminate_outliers(m)[0]) == 6

    def test_at_most_half(self, rng):
        d = np.r_[np.full(4, 10.0), rng.uniform(0, 40, 6)]
        z = np.zeros((10, 3))
        m = BistaticMeasurements(d, rng.uniform(-5, 5, 10), z, z, np.zeros(10), np.zeros(10))
        assert len(eliminate_outliers(m, mad_threshold=0.0, min_distance=0.0)[0]) >= 5

    def test_too_few(self):
        z = np.zeros((2, 3))
        m = BistaticMeasurements([1.0, 50.0], [0.0, 9.0], z, z, [0, 0], [0, 1])
        assert len(eliminate_outliers(m)[0]) == 2


class TestClustering:
    def separated(self, rng):
        d = np.concatenate([c + rng.normal(0, 0.02, 12) for c in (9.0, 14.0, 20.0)])
        v = np.concatenate([c + rng.normal(0, 0.05, 12) for c in (1.0, -3.0, 6.0)])
        z = np.zeros((36, 3))
        truth = np.repeat(np.arange(3), 12)
        return BistaticMeasurements(d, v, z, z, np.zeros(36), np.zeros(36)), truth

    def test_single(self, rng):
        m, _ = self.separated(rng)
        cl = cluster_measurements(m, 1)
        assert len(cl) == 1 and cl[0].P == 36

    def test_matches_truth(self, rng):
        m, truth = self.separated(rng)
        cl = cluster_measurements(m, 3, seed=0)
        assert sum(c.P for c in cl) == 36
        for c in cl:
            assert np.unique(truth[c.members]).size == 1
        assert sorted(np.unique(truth[c.members])[0] for c in cl) == [0, 1, 2]

    def test_deterministic(self, rng):
        m, _ = self.separated(rng)
        a = [c.members.tolist() for c in cluster_measurements(m, 3, seed=5)]
        b = [c.members.tolist() for c in cluster_measurements(m, 3, seed=5)]
        assert a == b

    def test_too_few_points(self, rng):
        m, _ = self.separated(rng)
        with pytest.raises(ValueError):
            cluster_measurements(m.subset([0, 1]), 3)


class TestClosedForm:
    def test_exact(self):
        m = measurements([2.0, 3.0, 5.0], np.zeros(3), np.zeros(3), RING)
        assert np.max(np.abs(closed_form_position(m) - [2, 3, 5])) < 1e-9

    def test_symmetric_axis(self):
        ring = np.array([[1.0, 0, 0], [-0.5, np.sqrt(3) / 2, 0], [-0.5, -np.sqrt(3) / 2, 0]])
        p = closed_form_position(measurements([0, 0, 6.0], np.zeros(3), np.zeros(3), ring))
        assert abs(p[0]) < 1e-9 and abs(p[1]) < 1e-9

    def test_collinear(self):
        line = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        with pytest.raises(ValueError, match="rank"):
            closed_form_position(measurements([1.0, 2, 5], np.zeros(3), np.zeros(3), line))

    def test_negative_radicand_flag(self):
        m = measurements([2.0, 3.0, 5.0], np.zeros(3), np.zeros(3), RING)
        bad = BistaticMeasurements(m.d * [1.0, 1.6, 0.7], m.v, m.tx_pos, m.rx_pos, m.tx_idx, m.rx_idx)
        p, flags = closed_form_position(bad, return_flags=True)
        if flags:
            assert flags == ("negative_radicand",) and p[2] == 0

    def test_common_rx(self):
        tx = np.array([[0.0, 0, 0], [1.5, 0, 0], [0, 1.2, 0], [-1, -1, 0]])
        m = measurements([1.0, -2.0, 7.0], np.zeros(3), tx, [0.3, 0.3, 0])
        assert np.max(np.abs(closed_form_position(m, common="rx") - [1, -2, 7])) < 1e-9

    def test_many_random(self, rng):
        worst = 0.0
        for _ in range(100):
            p = rng.uniform(-4, 4, 3) + [0, 0, 6]
            a = np.r_[rng.uniform(-2, 2, 2), 0.0]
            rx = np.column_stack([rng.uniform(-2, 2, (5, 2)), np.zeros(5)])
            m = measurements(p, np.zeros(3), a, rx)
            worst = max(worst, np.max(np.abs(closed_form_position(m) - p)))
        assert worst <= 1e-8


class TestPositionGda:
    def meas(self):
        tx = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0], [2.0, 0, 0], [2.0, 0, 0]])
        rx = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0.5, 0.5, 0], [-0.5, -0.5, 0]])
        return measurements([1.0, 2.0, 6.0], [1.0, -2.0, 0.5], tx, rx)

    def test_fixed_point(self):
        m = self.meas()
        assert np.max(np.abs(position_gradient([1.0, 2.0, 6.0], m))) < 1e-12
        p, _ = position_gda([1.0, 2.0, 6.0], m)
        assert np.max(np.abs(p - [1, 2, 6])) < 1e-12

    def test_converges(self, rng):
        m = self.meas()
        for _ in range(10):
            start = np.array([1.0, 2.0, 6.0]) + 0.5 * rng.normal(size=3) / np.sqrt(3)
            p, trace = position_gda(start, m, H_prime=10)
            assert np.max(np.abs(p - [1, 2, 6])) < 1e-6
            assert min(trace) <= trace[0]

    def test_gradient_fd(self, rng):
        m = self.meas()
        h = 1e-6
        for _ in range(20):
            p = rng.uniform(-3, 3, 3) + [0, 0, 5]
            fd = np.array([(position_objective(p + h * e, m) - position_objective(p - h * e, m)) / (2 * h)
                           for e in np.eye(3)])
            g = position_gradient(p, m)
            assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)

    def test_rejects_bad_start(self):
        with pytest.raises(ValueError):
            position_gda([0, 0, -1.0], self.meas())


class TestVelocity:
    def test_exact_three(self):
        v = np.array([3.0, -1.0, 2.0])
        tx = np.array([[0.0, 0, 0], [2.0, 0, 0], [0, 2.0, 0]])
        m = measurements([1.0, 2.0, 6.0], v, tx, RING)
        assert np.max(np.abs(velocity_ls([1.0, 2.0, 6.0], m) - v)) < 1e-9

    def test_static(self):
        m = measurements([1.0, 2.0, 6.0], np.zeros(3), np.zeros(3), RING)
        assert np.allclose(velocity_ls([1.0, 2.0, 6.0], m), 0, atol=1e-15)

    def test_overdetermined(self, rng):
        v = rng.normal(size=3)
        tx = np.column_stack([rng.uniform(-2, 2, (8, 2)), np.zeros(8)])
        rx = np.column_stack([rng.uniform(-2, 2, (8, 2)), np.zeros(8)])
        p = np.array([0.5, -1.0, 7.0])
        m = measurements(p, v, tx, rx)
        vh = velocity_ls(p, m)
        U = (p - tx) / np.linalg.norm(p - tx, axis=1)[:, None] + (p - rx) / np.linalg.norm(p - rx, axis=1)[:, None]
        assert np.linalg.norm(U @ vh - m.v) <= 1e-9

    def test_too_few(self):
        m = measurements([1.0, 2.0, 6.0], np.zeros(3), np.zeros(3), RING[:2])
        with pytest.raises(ValueError):
            velocity_ls([1.0, 2.0, 6.0], m)


def truth_estimates(scene, plan, cfg):
    g = np.ones((plan.N, scene.geometry.n_rx, scene.L))
    tr = pair_truth(scene, g, plan, cfg)
    return [PairEstimate((n, j), scene.L, tr.mu[n, j], tr.nu[n, j], tr.alpha[n, j])
            for n in range(plan.N) for j in range(scene.geometry.n_rx)]


class TestPipeline:
    def test_single_target_equals_direct(self, cfg, plan, geometry):
        sc = make_scene(geometry, [[1.0, 2.0, 6.0]], [[3.0, -2.0, 1.0]])
        est = truth_estimates(sc, plan, cfg)
        targets, filt, clusters = vibs_pipeline(est, geometry, cfg, plan, seed=0, L_hat=1)
        assert len(targets) == 1 and len(clusters) == 1
        direct = locate_cluster(filt)[0]
        assert np.allclose(targets[0].position, direct, atol=1e-9)
        assert np.max(np.abs(targets[0].position - [1, 2, 6])) < 1e-6

    def test_noiseless_three_targets(self, cfg, plan, geometry):
        P = np.array([[1.0, 2.0, 6.0], [-3.0, 1.5, 5.5], [2.5, -2.0, 7.0]])
        V = np.array([[3.0, -2.0, 1.0], [10.0, 5.0, 0.0], [-4.0, 8.0, 2.0]])
        sc = make_scene(geometry, P, V)
        targets, _, _ = vibs_pipeline(truth_estimates(sc, plan, cfg), geometry, cfg, plan, seed=1)
        est = np.array([t.position for t in targets])
        vel = np.array([t.velocity for t in targets])
        for p, v in zip(P, V):
            i = np.argmin(np.linalg.norm(est - p, axis=1))
            assert np.linalg.norm(est[i] - p) <= 1e-3
            assert np.linalg.norm(vel[i] - v) <= 1e-3

    def test_sns_two_null_noiseless(self, cfg, plan, geometry):
        P = np.array([[1.0, 2.0, 6.0], [-3.0, 1.5, 5.5], [2.5, -2.0, 7.0]])
        sc = make_scene(geometry, P, np.zeros((3, 3)))
        full = truth_estimates(sc, plan, cfg)
        # null (n=0, l=1) and (n=2, l=2) across all Rx antennas
        drop = {(0, 1), (2, 2)}
        est = []
        for e in full:
            keep = [l for l in range(3) if (e.pair[0], l) not in drop]
            est.append(PairEstimate(e.pair, len(keep), e.mu[keep], e.nu[keep], e.alpha[keep]))
        a, _, _ = vibs_pipeline(full, geometry, cfg, plan, seed=2)
        b, _, _ = vibs_pipeline(est, geometry, cfg, plan, seed=2)
        pa = np.array(sorted(t.position.tolist() for t in a))
        pb = np.array(sorted(t.position.tolist() for t in b))
        assert np.max(np.abs(pa - pb)) <= 1e-6

    def test_estimator_api(self, cfg, plan, geometry, tmp_path):
        sc = make_scene(geometry, [[1.0, 2.0, 6.0]], [[3.0, -2.0, 1.0]])
        est = truth_estimates(sc, plan, cfg)
        model = VirtualBistaticSensing(geometry=geometry, cfg=cfg, plan=plan, random_state=0)
        pos = model.fit(est).predict(est)
        assert pos.shape == (1, 3) and np.linalg.norm(pos[0] - [1, 2, 6]) < 1e-6
        assert np.linalg.norm(model.velocities_[0] - [3, -2, 1]) < 1e-6
        assert model.get_params()["H_prime"] == 10
        path = tmp_path / "t.csv"
        write_target_csv(model.targets_, path)
        assert path.read_text().splitlines()[0] == "cluster,x,y,z,vx,vy,vz,flags"
