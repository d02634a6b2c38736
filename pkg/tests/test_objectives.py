from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floqctrl import floquet as fq
from floqctrl import objectives as ob
from floqctrl import spinsys as ss
from floqctrl.validation import end_spin_controls, random_model

NU = 24
FIG1 = ss.TwoSpinParams(0.13, 0.26, 5.40, 9.95)
TARGET = ss.canonical_gate((0.5, 0.4, 0.3))
PSI2 = ss.bloch_product_state(ss.BlochProductState((1.59, 2.10), (5.23, 0.57)))
CHAIN3 = ss.ChainParams((0.91, 0.97, 0.40), (0.78, 1.48), (1.27, 2.65))
PSI3 = ss.bloch_product_state(ss.BlochProductState((1.39, 1.28, 0.71), (6.03, 0.95, 5.30)))


def two_spin_model(seed=0, t_f=0.15, scale=2.0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-scale, scale, (4, 3))
    return fq.ControlModel(ss.two_spin_hamiltonian(FIG1), end_spin_controls(2), a, np.pi / t_f)


def chain_model(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (4, 3))
    return fq.ControlModel(ss.chain_hamiltonian(CHAIN3), end_spin_controls(3), a, np.pi / 1.0)


def theta_of(model, include_omega):
    th = model.amplitudes.ravel()
    return np.append(th, model.omega) if include_omega else th


def model_of(model, theta, include_omega):
    m = model.with_amplitudes(theta[:model.amplitudes.size].reshape(model.amplitudes.shape))
    return m.with_omega(theta[-1]) if include_omega else m


def fd_gradient(obj, model, h=1e-6):
    th = theta_of(model, obj.include_omega)
    g = np.zeros_like(th)
    for p in range(th.size):
        e = np.zeros_like(th)
        e[p] = h
        fp = obj.evaluate(model_of(model, th + e, obj.include_omega), NU, grad=False).value
        fm = obj.evaluate(model_of(model, th - e, obj.include_omega), NU, grad=False).value
        g[p] = (fp - fm) / (2 * h)
    return g


def assert_gradient(obj, model, rtol=1e-6):
    an = obj.evaluate(model, NU).grad
    fd = fd_gradient(obj, model)
    assert np.abs(an - fd).max() < rtol * max(1.0, np.abs(fd).max())


class TestGateFidelity:
    def test_identity(self):
        assert ob.gate_fidelity(np.eye(4), np.eye(4)) == pytest.approx(1.0)

    def test_global_phase(self):
        assert ob.gate_fidelity(1j * np.eye(4), np.eye(4)) == pytest.approx(0.0, abs=1e-15)
        assert ob.gate_fidelity(1j * np.eye(4), np.eye(4), modulus=True) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ob.gate_fidelity(np.eye(2), np.eye(4))

    def test_bounded_by_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = random_model(rng, 2)
            u = fq.propagator(fq.solve(m, NU), m.t_final)
            assert abs(ob.gate_fidelity(u, TARGET)) <= 1 + 1e-12


class TestGateObjective:
    def test_value_matches_propagator(self):
        m = two_spin_model()
        ev = ob.GateObjective(TARGET, 0.01, include_omega=True).evaluate(m, NU)
        u = fq.propagator(fq.solve(m, NU), m.t_final)
        assert ev.parts["F0"] == pytest.approx(ob.gate_fidelity(u, TARGET), abs=1e-12)
        assert ev.parts["Fp"] == pytest.approx(0.01 * m.t_final)
        assert ev.value == pytest.approx(ev.parts["F0"] - ev.parts["Fp"])
        assert ev.parts["defect"] < 1e-9

    @pytest.mark.parametrize("include_omega", [False, True])
    @pytest.mark.parametrize("modulus", [False, True])
    def test_gradient_fd(self, include_omega, modulus):
        obj = ob.GateObjective(TARGET, 0.02, include_omega=include_omega, modulus=modulus)
        assert_gradient(obj, two_spin_model(1))

    def test_negative_penalty(self):
        with pytest.raises(ValueError):
            ob.GateObjective(TARGET, -1.0)

    def test_penalty_omega_gradient(self):
        assert ob.duration_penalty_omega_grad(0.3, 2.0) == pytest.approx(-0.3 * np.pi / 4)


class TestTangleObjective:
    def test_value_and_curvature(self):
        m = two_spin_model(2)
        t = 0.12
        ev = ob.TangleObjective(PSI2, t, 1e-3).evaluate(m, NU)
        es = fq.solve(m, NU)

        def c2(s):
            return ss.tangle_pure(fq.propagator(es, s) @ PSI2)

        h = 1e-4
        fd_curv = (c2(t + h) - 2 * c2(t) + c2(t - h)) / h**2
        assert ev.parts["F0"] == pytest.approx(c2(t), abs=1e-12)
        assert ev.parts["curvature"] == pytest.approx(fd_curv, rel=1e-5, abs=1e-5)
        assert ev.parts["Fp"] == pytest.approx(1e-3 * ev.parts["curvature"] ** 2)

    @pytest.mark.parametrize("penalty", [0.0, 1e-3])
    def test_gradient_fd(self, penalty):
        assert_gradient(ob.TangleObjective(PSI2, 0.13, penalty), two_spin_model(3), rtol=1e-5)

    def test_rejects_bad_state(self):
        with pytest.raises(ValueError):
            ob.TangleObjective(np.ones(4), 0.1)
        with pytest.raises(ValueError):
            ob.TangleObjective(PSI3, 0.1)

    def test_directional_curvature_fd(self):
        m = two_spin_model(4)
        obj = ob.TangleObjective(PSI2, 0.13, 1e-4)
        b = np.random.default_rng(1).normal(size=m.amplitudes.size)
        h = 1e-5
        th = theta_of(m, False)
        gp = obj.evaluate(model_of(m, th + h * b, False), NU).grad @ b
        gm = obj.evaluate(model_of(m, th - h * b, False), NU).grad @ b
        fd = (gp - gm) / (2 * h)
        an = obj.directional_curvature(m, b, NU)
        assert an == pytest.approx(fd, rel=1e-5, abs=1e-6)

    def test_hessian_symmetric_and_consistent(self):
        m = fq.ControlModel(ss.two_spin_hamiltonian(FIG1), end_spin_controls(2), np.random.default_rng(5).uniform(-2, 2, (4, 2)), np.pi / 0.15)
        obj = ob.TangleObjective(PSI2, 0.13)
        hess = obj.hessian(m, NU)
        np.testing.assert_allclose(hess, hess.T, atol=1e-10)
        b = np.random.default_rng(6).normal(size=hess.shape[0])
        assert b @ hess @ b == pytest.approx(obj.directional_curvature(m, b, NU), rel=1e-8, abs=1e-10)


class TestGateCurvature:
    @pytest.mark.parametrize("modulus", [False, True])
    def test_directional_curvature_with_omega(self, modulus):
        m = two_spin_model(7)
        obj = ob.GateObjective(TARGET, 0.05, include_omega=True, modulus=modulus)
        rng = np.random.default_rng(2)
        b = np.append(rng.normal(size=m.amplitudes.size), 3.0)
        th = theta_of(m, True)
        h = 1e-5
        gp = obj.evaluate(model_of(m, th + h * b, True), NU).grad @ b
        gm = obj.evaluate(model_of(m, th - h * b, True), NU).grad @ b
        assert obj.directional_curvature(m, b, NU) == pytest.approx((gp - gm) / (2 * h), rel=1e-5, abs=1e-6)

    def test_hessian_with_locked_time_unsupported(self):
        with pytest.raises(NotImplementedError):
            ob.GateObjective(TARGET, include_omega=True).hessian(two_spin_model(), NU)


class TestChainBound:
    def test_value_matches_lower_bound(self):
        m = chain_model()
        ev = ob.ChainBoundObjective(PSI3, 3, 0.7).evaluate(m, NU)
        psi = fq.propagator(fq.solve(m, NU), 0.7) @ PSI3
        assert ev.value == pytest.approx(ss.tangle_lower_bound(psi), abs=1e-12)

    def test_gradient_fd(self):
        assert_gradient(ob.ChainBoundObjective(PSI3, 3, 0.7), chain_model(1))

    def test_curvature_fd(self):
        m = chain_model(2)
        obj = ob.ChainBoundObjective(PSI3, 3, 1.0)
        b = np.random.default_rng(0).normal(size=m.amplitudes.size)
        th = theta_of(m, False)
        h = 1e-5
        gp = obj.evaluate(model_of(m, th + h * b, False), NU).grad @ b
        gm = obj.evaluate(model_of(m, th - h * b, False), NU).grad @ b
        assert obj.directional_curvature(m, b, NU) == pytest.approx((gp - gm) / (2 * h), rel=1e-5, abs=1e-6)

    def test_state_size_mismatch(self):
        with pytest.raises(ValueError):
            ob.ChainBoundObjective(PSI2, 3, 1.0)


class TestMultiTime:
    def test_mean_of_members(self):
        m = two_spin_model(8)
        members = [ob.TangleObjective(PSI2, t, 1e-4) for t in (0.1, 0.13)]
        avg = ob.MultiTimeAverage(members).evaluate(m, NU)
        evs = [o.evaluate(m, NU) for o in members]
        assert avg.value == pytest.approx(np.mean([e.value for e in evs]), abs=1e-14)
        np.testing.assert_allclose(avg.grad, np.mean([e.grad for e in evs], axis=0), atol=1e-13)
        assert avg.parts["F0"] == pytest.approx(np.mean([e.parts["F0"] for e in evs]))

    def test_empty(self):
        with pytest.raises(ValueError):
            ob.MultiTimeAverage([])

    def test_shared_requests(self):
        avg = ob.MultiTimeAverage([ob.TangleObjective(PSI2, 0.1), ob.TangleObjective(PSI2, 0.1)])
        assert len(avg.requests()) == 3


class TestEnsemble:
    def test_configurations_within_error(self):
        spec = ob.EnsembleSpec(CHAIN3, 0.1, 50, seed=3)
        for c in spec.configurations():
            assert np.all(np.abs(np.array(c.gx) / np.array(CHAIN3.gx) - 1) <= 0.1)
            assert np.all(np.abs(np.array(c.gy) / np.array(CHAIN3.gy) - 1) <= 0.1)
            assert c.omegas == CHAIN3.omegas

    def test_streams_deterministic_and_distinct(self):
        spec = ob.EnsembleSpec(CHAIN3, 0.05, 5, seed=1)
        assert spec.configurations("train") == spec.configurations("train")
        assert spec.configurations("train") != spec.configurations("test")

    def test_zero_error_collapses(self):
        m = chain_model(3)
        inner = ob.ChainBoundObjective(PSI3, 3, 1.0)
        ens = ob.EnsembleObjective.from_spec(inner, ob.EnsembleSpec(CHAIN3, 0.0, 3))
        a, b = ens.evaluate(m, NU), inner.evaluate(m, NU)
        assert a.value == pytest.approx(b.value, abs=1e-13)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)

    def test_gradient_fd(self):
        inner = ob.ChainBoundObjective(PSI3, 3, 1.0)
        ens = ob.EnsembleObjective.from_spec(inner, ob.EnsembleSpec(CHAIN3, 0.1, 3, seed=2))
        assert_gradient(ens, chain_model(4))

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            ob.EnsembleSpec(CHAIN3, -0.1, 3)
        with pytest.raises(ValueError):
            ob.EnsembleSpec(CHAIN3, 0.1, 0)
        with pytest.raises(ValueError):
            ob.EnsembleObjective(ob.ChainBoundObjective(PSI3, 3, 1.0), [np.eye(8)] * 2, [0.3, 0.3])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tangle_objective_bounded(seed):
    m = two_spin_model(seed % 1000, scale=3.0)
    ev = ob.TangleObjective(PSI2, 0.11).evaluate(m, NU, grad=False)
    assert -1e-12 <= ev.value <= 1 + 1e-12
