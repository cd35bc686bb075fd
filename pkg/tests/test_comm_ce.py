import numpy as np
import pytest

from ocdm_isac.comm_ce import (FdObservations, SensingEnhancedChannelEstimator, assemble_fd, ber_pipeline,
                               build_polar_dictionary, domp, generate_pilots, mutual_coherence,
                               qam16_demodulate, qam16_modulate, refine_ls, sensing_enhance,
                               simulate_pilot_rx)
from ocdm_isac.scene import ArrayGeometry, comm_channel_fd, near_field_steering
from ocdm_isac.waveform import dfnt_matrix

F_C = 30e9
LAM = 2.99792458e8 / F_C


def ula(n):
    return ArrayGeometry.uniform(n, LAM).tx_positions


def circulant_oracle(S_p, G, n_tx):
    """Materialized C_p acting on taps stacked tap-major: h = [h_0; h_1; ...]."""
    C = np.zeros((G, G * n_tx), complex)
    for g in range(G):
        for g2 in range(G):
            for a in range(n_tx):
                C[g, g2 * n_tx + a] = S_p[(g - g2) % G, a]
    return C


def random_taps(rng, G, n_tx):
    return rng.normal(size=(G, n_tx)) + 1j * rng.normal(size=(G, n_tx))


class TestPilots:
    def test_dfnt_roundtrip(self):
        p = generate_pilots(5, 8, 3, seed=0)
        Phi = dfnt_matrix(8)
        for X, S in zip(p.X, p.S):
            assert np.max(np.abs(Phi @ S - X)) <= 1e-12
            assert np.allclose(np.sum(np.abs(S) ** 2, axis=0), np.sum(np.abs(X) ** 2, axis=0))
        assert np.allclose(np.abs(p.X), 1.0, atol=1e-15)

    def test_deterministic(self):
        assert np.array_equal(generate_pilots(3, 4, 2, seed=9).S, generate_pilots(3, 4, 2, seed=9).S)

    def test_odd_rejected(self):
        with pytest.raises(ValueError):
            generate_pilots(3, 5, 2, seed=0)


class TestPilotRx:
    def test_materialized_oracle(self, rng):
        G, n_tx, P = 8, 4, 2.0
        p = generate_pilots(3, G, n_tx, seed=1)
        h = random_taps(rng, G, n_tx)
        y = simulate_pilot_rx(p, h, P)
        for i in range(3):
            want = np.sqrt(P) * circulant_oracle(p.S[i], G, n_tx) @ h.ravel()
            assert np.max(np.abs(y[i] - want)) <= 1e-10

    def test_impulse(self):
        p = generate_pilots(2, 8, 3, seed=2)
        h = np.zeros((8, 3), complex)
        h[0, 0] = 1
        assert np.allclose(simulate_pilot_rx(p, h, 4.0), 2.0 * p.S[:, :, 0], atol=1e-13)

    def test_zero_channel_is_noise(self):
        p = generate_pilots(50, 16, 2, seed=3)
        y = simulate_pilot_rx(p, np.zeros((16, 2)), 1.0, noise_var=0.5, seed=4)
        assert np.mean(np.abs(y) ** 2) == pytest.approx(0.5, rel=0.1)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            simulate_pilot_rx(generate_pilots(2, 8, 3, seed=0), np.zeros((4, 3)), 1.0)


class TestAssembleFd:
    def test_block_diagonalization(self):
        G, n_tx = 4, 2
        p = generate_pilots(2, G, n_tx, seed=5)
        F = np.fft.fft(np.eye(G), norm="ortho")
        FH = np.kron(F.conj().T, np.eye(n_tx))
        fd = assemble_fd(p, np.zeros((2, G)), 1.0)
        for i in range(2):
            M = F @ circulant_oracle(p.S[i], G, n_tx) @ FH
            want = np.zeros_like(M)
            for g in range(G):
                want[g, g * n_tx:(g + 1) * n_tx] = fd.D[g, i]
            assert np.max(np.abs(M - want)) <= 1e-10

    def test_linear_model_identity(self, rng):
        G, n_tx, P = 16, 5, 3.0
        p = generate_pilots(6, G, n_tx, seed=6)
        h = random_taps(rng, G, n_tx)
        fd = assemble_fd(p, simulate_pilot_rx(p, h, P), P)
        hf = comm_channel_fd(h)
        want = np.sqrt(P) * np.einsum("gpt,gt->gp", fd.D, hf)
        assert np.max(np.abs(fd.y - want)) <= 1e-9

    def test_flat_single_antenna(self):
        p = generate_pilots(4, 8, 1, seed=7)
        h = np.zeros((8, 1), complex)
        h[0] = 0.3 - 0.4j
        fd = assemble_fd(p, simulate_pilot_rx(p, h, 1.0), 1.0)
        # a flat channel has the same frequency response on every subcarrier
        assert np.max(np.abs(fd.y - (0.3 - 0.4j) / np.sqrt(8) * fd.D[:, :, 0])) <= 1e-12

    def test_noise_white(self):
        p = generate_pilots(200, 32, 1, seed=8)
        fd = assemble_fd(p, simulate_pilot_rx(p, np.zeros((32, 1)), 1.0, noise_var=2.0, seed=9), 1.0)
        assert np.mean(np.abs(fd.y) ** 2) == pytest.approx(2.0, rel=0.05)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            FdObservations(np.zeros((4, 3)), np.zeros((4, 2, 5)), 1.0)


class TestDictionary:
    def test_unit_norm(self):
        d = build_polar_dictionary(ula(16), F_C)
        assert np.allclose(np.linalg.norm(d.W, axis=0), 1.0, atol=1e-12)
        assert d.W.shape[1] == d.n_atoms == len(d.distance)

    def test_atom_matches_steering(self):
        tx = ula(16)
        d = build_polar_dictionary(tx, F_C)
        centre = tx.mean(axis=0)
        for i in np.flatnonzero(np.isfinite(d.distance))[:20]:
            s, r = d.sine[i], d.distance[i]
            p = centre + r * np.array([s, np.sqrt(1 - s * s), 0.0])
            assert abs(np.vdot(d.W[:, i], near_field_steering(p, tx, F_C))) == pytest.approx(1.0, abs=1e-12)

    def test_coherence_deterministic(self):
        tx = ula(64)
        a = mutual_coherence(build_polar_dictionary(tx, F_C).W)
        b = mutual_coherence(build_polar_dictionary(tx, F_C).W)
        assert a == b and 0 < a < 1

    def test_dmin_guard(self):
        with pytest.raises(ValueError):
            build_polar_dictionary(ula(512), F_C, d_min=1.0)
        with pytest.raises(ValueError):
            build_polar_dictionary(ula(16), F_C, d_min=5.0, d_max=4.0)


def one_sparse(seed, N_CE=8, n_tx=16, G=4, noise_var=0.0):
    rng = np.random.default_rng(seed)
    d = build_polar_dictionary(ula(n_tx), F_C)
    idx = int(rng.integers(d.n_atoms))
    coef = rng.normal(size=G) + 1j * rng.normal(size=G)
    hf = coef[:, None] * d.W[:, idx][None, :]
    taps = np.fft.ifft(hf, axis=0, norm="ortho")
    p = generate_pilots(N_CE, G, n_tx, seed=seed)
    fd = assemble_fd(p, simulate_pilot_rx(p, taps, 1.0, noise_var, seed), 1.0, noise_var)
    return d, idx, coef, hf, fd


class TestDomp:
    def test_one_sparse_exact(self):
        d, idx, coef, hf, fd = one_sparse(11)
        res = domp(fd, d.W, n_iterations=1)
        assert res.support == [idx]
        assert np.max(np.abs(res.h_ini - hf)) <= 1e-10
        # brute-force correlation check of the argmax
        A = np.sqrt(fd.P) * fd.D
        score = [sum(abs(np.vdot(A[g] @ d.W[:, i], fd.y[g])) for g in range(fd.G)) for i in range(d.n_atoms)]
        assert int(np.argmax(score)) == idx

    def test_zero_observations(self):
        d, *_ = one_sparse(0)
        fd = FdObservations(np.zeros((4, 8), complex), np.ones((4, 8, 16), complex), 1.0)
        res = domp(fd, d.W, 3)
        assert res.support == [] and np.all(res.h_ini == 0) and "zero_observations" in res.flags

    def test_residual_non_increasing(self):
        d, _, _, _, fd = one_sparse(12, N_CE=16, noise_var=0.1)
        res = domp(fd, d.W, n_iterations=8)
        assert np.all(np.diff(res.residual_norms) <= 1e-12)

    def test_too_many_iterations(self):
        d, _, _, _, fd = one_sparse(1)
        with pytest.raises(ValueError):
            domp(fd, d.W, n_iterations=9)


class TestEnhancement:
    def test_replace_on_grid(self):
        d, idx, _, _, fd = one_sparse(13)
        res = domp(fd, d.W, 1)
        tx = ula(16)
        centre = tx.mean(axis=0)
        s = d.sine[idx]
        r = d.distance[idx] if np.isfinite(d.distance[idx]) else 1e6
        pos = centre + r * np.array([s, np.sqrt(1 - s * s), 0.0])
        en = sensing_enhance(res, [pos], 0.6, tx, F_C)
        assert en.replaced == [0]
        assert abs(np.vdot(en.W_sel[:, 0], res.W_sel[:, 0])) >= 0.6

    def test_no_match_unchanged(self):
        d, idx, _, _, fd = one_sparse(14)
        res = domp(fd, d.W, 1)
        tx = ula(16)
        far_off = [[-50.0, 0.0, 0.1], [50.0, 0.0, 0.1]]
        C = [abs(np.vdot(res.W_sel[:, 0], near_field_steering(p, tx, F_C))) for p in far_off]
        assert max(C) < 0.6
        en = sensing_enhance(res, far_off, 0.6, tx, F_C)
        assert en.replaced == [] and np.array_equal(en.W_sel, res.W_sel)

    def test_empty_replacement_is_plain_ls(self):
        d, _, _, _, fd = one_sparse(15, N_CE=16, noise_var=0.05)
        res = domp(fd, d.W, 4)
        en = sensing_enhance(res, np.zeros((0, 3)), 0.6, ula(16), F_C)
        assert np.allclose(refine_ls(en.W_sel, fd), res.h_ini, atol=1e-10)

    def test_bad_epsilon(self):
        d, _, _, _, fd = one_sparse(1)
        with pytest.raises(ValueError):
            sensing_enhance(domp(fd, d.W, 1), [[0, 0, 5.0]], 0.0, ula(16), F_C)


class TestRefineLs:
    def test_exact_columns(self, rng):
        tx = ula(16)
        pts = [[1.0, 4.0, 0.0], [-2.0, 6.0, 0.0]]
        Wt = np.stack([near_field_steering(p, tx, F_C) for p in pts], axis=1)
        G = 8
        hf = (rng.normal(size=(G, 2)) + 1j * rng.normal(size=(G, 2))) @ Wt.T
        taps = np.fft.ifft(hf, axis=0, norm="ortho")
        p = generate_pilots(6, G, 16, seed=2)
        fd = assemble_fd(p, simulate_pilot_rx(p, taps, 1.0), 1.0)
        est = refine_ls(Wt, fd)
        assert np.sum(np.abs(est - hf) ** 2) / np.sum(np.abs(hf) ** 2) <= 1e-20

    def test_underdetermined(self):
        d, _, _, _, fd = one_sparse(1)
        with pytest.raises(ValueError):
            refine_ls(d.W[:, :9], fd)

    def test_estimator_api(self):
        d, idx, _, hf, fd = one_sparse(16)
        est = SensingEnhancedChannelEstimator(dictionary=d, tx_positions=ula(16), f_c=F_C, n_iterations=1)
        h = est.fit(fd).predict()
        assert np.max(np.abs(h - hf)) <= 1e-10
        assert est.get_params()["n_iterations"] == 1


class TestBer:
    def test_qam_roundtrip(self, rng):
        bits = rng.integers(0, 2, 4000)
        sym = qam16_modulate(bits)
        assert np.mean(np.abs(sym) ** 2) == pytest.approx(1.0, rel=0.05)
        assert np.array_equal(qam16_demodulate(sym), bits)

    @pytest.mark.parametrize("wf", ["ocdm", "ofdm"])
    def test_noiseless_zero(self, wf, rng):
        taps = random_taps(rng, 8, 4)
        ber, n = ber_pipeline(taps, waveform=wf, n_bits=4 * 256 * 4, seed=0, noiseless=True)
        assert ber == 0 and n == 4096

    def test_bad_args(self, rng):
        taps = random_taps(rng, 8, 4)
        with pytest.raises(ValueError):
            ber_pipeline(taps, waveform="otfs", n_bits=1024)
        with pytest.raises(ValueError):
            ber_pipeline(taps, n_bits=1000)
