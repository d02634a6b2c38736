from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from floqctrl import floquet as fq
from floqctrl import spinsys as ss
from floqctrl.validation import end_spin_controls, random_model

FIG1 = ss.TwoSpinParams(0.13, 0.26, 5.40, 9.95)


def fig1_model(amps=None, t_f=0.11):
    ctrls = end_spin_controls(2)
    a = np.zeros((4, 6)) if amps is None else amps
    return fq.ControlModel(ss.two_spin_hamiltonian(FIG1), ctrls, a, np.pi / t_f)


@pytest.fixture(scope="module")
def random_fig1():
    rng = np.random.default_rng(7)
    model = fig1_model(rng.uniform(-3, 3, (4, 6)))
    return model, fq.solve(model, 48)


class TestControlModel:
    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError):
            fq.ControlModel(np.array([[0, 1], [0, 0]]), (), np.zeros((0, 1)), 1.0)

    def test_rejects_bad_omega(self):
        with pytest.raises(ValueError):
            fig1_model().with_omega(0.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            fq.ControlModel(np.eye(2), (ss.SIGMA["x"],), np.zeros((2, 3)), 1.0)

    def test_pulses_vanish_at_ends(self):
        rng = np.random.default_rng(0)
        m = fig1_model(rng.normal(size=(4, 6)))
        f = m.pulses([0.0, m.t_final])
        np.testing.assert_allclose(f, 0, atol=1e-12)


class TestFourierBlock:
    def test_sine_blocks(self):
        k = fq.fourier_block(ss.SIGMA["x"], 1.0, 1, 1)
        op = fq.FloquetOperator(k, 1, 2, 1.0)
        np.testing.assert_allclose(op.block(1, 0), ss.SIGMA["x"] / 2j)
        np.testing.assert_allclose(op.block(0, 1), -ss.SIGMA["x"] / 2j)
        np.testing.assert_allclose(op.block(-1, 0), -ss.SIGMA["x"] / 2j)
        assert not op.block(1, -1).any()

    def test_hermitian(self):
        k = fq.fourier_block(ss.pauli("y", 2, 2), 0.7, 3, 5)
        np.testing.assert_allclose(k, k.conj().T)

    def test_zero_amplitude(self):
        assert not fq.fourier_block(ss.SIGMA["x"], 0.0, 1, 3).any()

    def test_harmonic_beyond_truncation(self):
        with pytest.raises(fq.TruncationError):
            fq.fourier_block(ss.SIGMA["x"], 1.0, 4, 3)


class TestAssemble:
    def test_zero_control_block_diagonal(self):
        m = fig1_model()
        k = fq.assemble(m, 8)
        for nu in range(-8, 9):
            np.testing.assert_allclose(k.block(nu, nu), m.drift + nu * m.omega * np.eye(4))
            for mu in range(-8, 9):
                if mu != nu:
                    assert not k.block(nu, mu).any()

    def test_no_drift_single_channel(self):
        m = fq.ControlModel(np.zeros((2, 2)), (ss.SIGMA["x"],), [[1.0]], 1.0)
        k = fq.assemble(m, 2)
        for nu in range(-2, 3):
            np.testing.assert_allclose(k.block(nu, nu), nu * np.eye(2))
        np.testing.assert_allclose(k.block(1, 0), ss.SIGMA["x"] / 2j)

    def test_fig1_dimension(self):
        rng = np.random.default_rng(1)
        k = fq.assemble(fig1_model(rng.normal(size=(4, 6))), 32)
        assert k.matrix.shape == (4 * 65, 4 * 65)
        assert np.abs(k.matrix - k.matrix.conj().T).max() < 1e-12

    def test_matches_sum_of_fourier_blocks(self):
        rng = np.random.default_rng(2)
        m = fig1_model(rng.normal(size=(4, 6)))
        nu = 8
        expect = np.kron(np.diag(np.arange(-nu, nu + 1) * m.omega), np.eye(4)) + np.kron(np.eye(2 * nu + 1), m.drift)
        for i, h in enumerate(m.controls):
            for n in range(1, 7):
                expect = expect + fq.fourier_block(h, m.amplitudes[i, n - 1], n, nu)
        np.testing.assert_allclose(fq.assemble(m, nu).matrix, expect, atol=1e-14)

    def test_hermitian_random(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            k = fq.assemble(random_model(rng, int(rng.integers(2, 4))), 12)
            assert np.abs(k.matrix - k.matrix.conj().T).max() < 1e-12

    def test_truncation_below_n_max(self):
        with pytest.raises(fq.TruncationError):
            fq.assemble(fig1_model(), 3)


class TestEigensystem:
    def test_zero_control_folding(self):
        m = fig1_model(t_f=0.4)
        es = fq.solve(m, 8)
        ev = np.linalg.eigvalsh(m.drift)
        folded = ev - m.omega * np.round(ev / m.omega)
        np.testing.assert_allclose(np.sort(es.quasi_energies), np.sort(folded), atol=1e-12)

    def test_zone_and_orthonormality(self, random_fig1):
        _, es = random_fig1
        assert es.quasi_energies.size == 4
        assert np.all(es.quasi_energies > -es.omega / 2) and np.all(es.quasi_energies <= es.omega / 2)
        np.testing.assert_allclose(es.vectors.conj().T @ es.vectors, np.eye(4), atol=1e-10)

    def test_completeness(self, random_fig1):
        _, es = random_fig1
        assert es.completeness_defect() < 1e-9

    def test_spectrum_periodicity(self, random_fig1):
        _, es = random_fig1
        d, nb = es.dim_sys, es.n_blocks
        for k in range(d):
            shifted = np.argmin(np.abs(es.full_energies - (es.quasi_energies[k] + es.omega)))
            assert abs(es.full_energies[shifted] - es.quasi_energies[k] - es.omega) < 1e-8
            a = es.vectors[:, k].reshape(nb, d)
            b = es.full_vectors[:, shifted].reshape(nb, d)
            central = slice(nb // 4, 3 * nb // 4)
            a_sh = np.roll(a, 1, axis=0)[central]
            b_c = b[central]
            phase = np.vdot(a_sh.ravel(), b_c.ravel())
            phase /= abs(phase)
            assert np.abs(b_c - phase * a_sh).max() < 1e-6

    def test_modes_periodic(self, random_fig1):
        _, es = random_fig1
        t = 0.037
        period = 2 * np.pi / es.omega
        np.testing.assert_allclose(es.modes(t + period), es.modes(t), atol=1e-8)

    def test_fallback_flags_leakage(self):
        rng = np.random.default_rng(4)
        m = fig1_model(rng.uniform(-20, 20, (4, 6)))
        es = fq.solve(m, 6)
        assert es.selected.size == 4

    def test_gauge_fixed(self, random_fig1):
        _, es = random_fig1
        v = es.vectors
        lead = v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])]
        np.testing.assert_allclose(lead.imag, 0, atol=1e-15)
        assert np.all(lead.real > 0)


class TestPropagator:
    def test_identity_at_zero(self, random_fig1):
        _, es = random_fig1
        np.testing.assert_allclose(fq.propagator(es, 0.0), np.eye(4), atol=1e-9)

    @pytest.mark.parametrize("t", [0.03, 0.11, 0.5])
    def test_drift_only_closed_form(self, t):
        m = fig1_model()
        es = fq.solve(m, 8)
        np.testing.assert_allclose(fq.propagator(es, t), scipy.linalg.expm(-1j * m.drift * t), atol=1e-12)

    def test_unitary(self, random_fig1):
        _, es = random_fig1
        for t in np.linspace(0, 0.5, 10):
            u = fq.propagator(es, t)
            assert np.abs(u.conj().T @ u - np.eye(4)).max() < 1e-8

    def test_matches_ode(self, random_fig1):
        m, es = random_fig1
        for t in (m.t_final, 0.173):
            assert np.abs(fq.propagator(es, t) - fq.ode_oracle(m, t)).max() < 1e-8


class TestTimeDerivative:
    def test_drift_first_order_at_zero(self):
        m = fig1_model()
        es = fq.solve(m, 8)
        np.testing.assert_allclose(fq.time_derivative(es, 0.0, 1), -1j * m.drift, atol=1e-12)

    def test_schrodinger(self, random_fig1):
        m, es = random_fig1
        for t in (0.02, 0.09, 0.3):
            lhs = fq.time_derivative(es, t, 1)
            assert np.abs(lhs + 1j * m.hamiltonian(t) @ fq.propagator(es, t)).max() < 1e-8

    def test_first_order_fd(self, random_fig1):
        _, es = random_fig1
        t, h = 0.07, 1e-5
        fd = (fq.propagator(es, t + h) - fq.propagator(es, t - h)) / (2 * h)
        assert np.abs(fd - fq.time_derivative(es, t, 1)).max() < 1e-6 * max(1, np.abs(fd).max())

    def test_second_order_fd(self, random_fig1):
        _, es = random_fig1
        t, h = 0.07, 1e-4
        fd = (fq.propagator(es, t + h) - 2 * fq.propagator(es, t) + fq.propagator(es, t - h)) / h**2
        d2 = fq.time_derivative(es, t, 2)
        assert np.abs(fd - d2).max() < 1e-4 * np.abs(d2).max()

    def test_higher_orders_chain(self, random_fig1):
        _, es = random_fig1
        t, h = 0.05, 1e-5
        for n in (3, 4):
            fd = (fq.time_derivative(es, t + h, n - 1) - fq.time_derivative(es, t - h, n - 1)) / (2 * h)
            an = fq.time_derivative(es, t, n)
            assert np.abs(fd - an).max() < 1e-5 * np.abs(an).max()

    def test_negative_order(self, random_fig1):
        with pytest.raises(ValueError):
            fq.time_derivative(random_fig1[1], 0.1, -1)


class TestOdeOracle:
    def test_zero_control(self):
        m = fig1_model()
        np.testing.assert_allclose(fq.ode_oracle(m, 0.2), scipy.linalg.expm(-1j * m.drift * 0.2), atol=1e-10)

    def test_identity_at_zero(self):
        np.testing.assert_array_equal(fq.ode_oracle(fig1_model(), 0.0), np.eye(4))

    def test_unitarity(self, random_fig1):
        m, _ = random_fig1
        u = fq.ode_oracle(m, m.t_final)
        assert np.abs(u.conj().T @ u - np.eye(4)).max() < 1e-10


class TestAdaptiveTruncation:
    def test_zero_control_minimum(self):
        assert fq.adaptive_truncation(fig1_model(), 1e-10) == 12

    def test_grows_with_strength(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(-1, 1, (4, 6))
        weak = fq.adaptive_truncation(fig1_model(0.01 * a), 1e-10)
        strong = fq.adaptive_truncation(fig1_model(30 * a), 1e-10)
        assert weak <= strong and strong > 12

    def test_bad_tolerance(self):
        with pytest.raises(ValueError):
            fq.adaptive_truncation(fig1_model(), 0.0)

    def test_cap(self):
        rng = np.random.default_rng(9)
        with pytest.raises(fq.TruncationError):
            fq.adaptive_truncation(fig1_model(50 * rng.uniform(-1, 1, (4, 6))), 1e-12, cap=24)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_propagator_unitary_random_models(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2)
    es = fq.solve(m, fq.adaptive_truncation(m, 1e-10) * 2)
    for t in rng.uniform(0, 3 * m.t_final, 10):
        u = fq.propagator(es, t)
        assert np.abs(u.conj().T @ u - np.eye(4)).max() < 1e-8
