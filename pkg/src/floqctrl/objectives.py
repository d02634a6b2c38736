"""Target functionals F = F0 - Fp with exact parameter gradients.

Every objective asks for a few propagator jets ``d^nU/dt^n`` at fixed or
duration-locked times, and turns their parameter derivatives into a gradient
by hand-written chain rules.  Parameters are the amplitude table flattened
row-major, optionally followed by Omega.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import floquet as fq
from . import varcalc as vc
from .parallel import worker_count
from .seeding import rng_for
from .spinsys import SIGMA_YY, ChainParams, chain_hamiltonian


@dataclass
class Evaluation:
    value: float
    grad: np.ndarray | None
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Request:
    """U^(order) at ``time``; locked requests sit at ``time * pi / Omega``."""

    order: int
    time: float
    locked: bool = False

    def at(self, omega: float) -> tuple[int, float]:
        return (self.order, self.time * np.pi / omega if self.locked else self.time)


def gate_fidelity(u: np.ndarray, target: np.ndarray, modulus: bool = False) -> float:
    """Re Tr(U^dagger U_d) / d, or |Tr(U^dagger U_d)| / d with ``modulus``."""
    u, target = np.asarray(u), np.asarray(target)
    if u.shape != target.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {target.shape}")
    z = np.vdot(u, target) / u.shape[0]
    return float(abs(z) if modulus else z.real)


def duration_penalty(p: float, t_f: float) -> float:
    return p * t_f


def duration_penalty_omega_grad(p: float, omega: float) -> float:
    """d(p * pi/Omega)/dOmega."""
    return -p * np.pi / omega**2


def tangle_and_curvature(psi: np.ndarray, psi1: np.ndarray, psi2: np.ndarray) -> tuple[float, float]:
    """C^2 and d^2C^2/dt^2 from a state and its first two time derivatives."""
    z = psi @ SIGMA_YY @ psi
    z1 = 2 * psi @ SIGMA_YY @ psi1
    z2 = 2 * (psi1 @ SIGMA_YY @ psi1 + psi @ SIGMA_YY @ psi2)
    return float(abs(z) ** 2), float(2 * abs(z1) ** 2 + 2 * np.real(np.conj(z) * z2))


def _bilinear(a, b):
    """a^T S b for S = sigma_y x sigma_y, batched over leading axes."""
    return np.einsum("...s,st,...t->...", a, SIGMA_YY, b)


class Objective:
    """Base class; subclasses supply ``requests`` and the chain rules."""

    include_omega: bool = False

    def requests(self) -> list[Request]:
        raise NotImplementedError

    def combine(self, jets: dict, grads: dict | None, omega: float) -> Evaluation:
        raise NotImplementedError

    def combine_second(self, jets: dict, direction_omega: float, omega: float) -> float:
        raise NotImplementedError

    def _keys(self, omega: float) -> dict:
        return {r: r.at(omega) for r in self.requests()}

    def evaluate(self, model: fq.ControlModel, nu_max: int | None = None, *, grad: bool = True) -> Evaluation:
        es = fq.solve(model, nu_max)
        ev = self._evaluate(es, model, grad)
        ev.parts["defect"] = es.completeness_defect()
        return ev

    def _evaluate(self, es: fq.FloquetEigensystem, model: fq.ControlModel, grad: bool) -> Evaluation:
        keys = self._keys(model.omega)
        raw = sorted({key for r, key in keys.items()} | {
            (key[0] + 1, key[1]) for r, key in keys.items() if r.locked
        })
        if not grad:
            vals = {key: fq.time_derivative(es, key[1], key[0]) for key in raw}
            return self.combine({r: vals[k] for r, k in keys.items()}, None, model.omega)
        dirs = vc.parameter_directions(model, self.include_omega)
        fo = vc.first_order(es, dirs)
        bundle = vc.propagator_gradient(es, fo, raw)
        jets, grads = {}, {}
        for r, key in keys.items():
            jets[r] = bundle.values[key]
            g = bundle.grads[key].copy()
            if r.locked and self.include_omega:
                # t = tau*pi/Omega moves with Omega: add U^(n+1) dt/dOmega
                g[-1] += bundle.values[(key[0] + 1, key[1])] * (-key[1] / model.omega)
            grads[r] = g
        return self.combine(jets, grads, model.omega)

    def directional_curvature(
        self, model: fq.ControlModel, b: np.ndarray, nu_max: int | None = None
    ) -> float:
        """d^2F/ds^2 along the parameter direction ``b`` (amplitudes, then Omega)."""
        es = fq.solve(model, nu_max)
        dirs = vc.parameter_directions(model, self.include_omega)
        direction = vc.combine(dirs, b)
        c = direction.omega
        keys = self._keys(model.omega)
        raw = sorted({(key[0] + m, key[1]) for r, key in keys.items() for m in (range(3) if r.locked else (0,))})
        sec = vc.directional_second(es, direction, raw)
        jets = {}
        for r, key in keys.items():
            u, ub, _, ubb = sec[key]
            if r.locked and c:
                n, t = key
                t1 = -t * c / model.omega
                t2 = 2 * t * c**2 / model.omega**2
                u1, u1b, _, _ = sec[(n + 1, t)]
                u2 = sec[(n + 2, t)][0]
                ubb = ubb + 2 * u1b * t1 + u2 * t1**2 + u1 * t2
                ub = ub + u1 * t1
            jets[r] = (u, ub, ubb)
        return float(self.combine_second(jets, c, model.omega))

    def hessian(self, model: fq.ControlModel, nu_max: int | None = None) -> np.ndarray:
        """Full parameter Hessian assembled from mixed second derivatives.

        Only fixed-time objectives are supported; cost is quadratic in the
        parameter count.
        """
        if any(r.locked for r in self.requests()) and self.include_omega:
            raise NotImplementedError("Hessian with locked duration is not assembled")
        es = fq.solve(model, nu_max)
        dirs = vc.parameter_directions(model, self.include_omega)
        fo = vc.first_order(es, dirs)
        keys = self._keys(model.omega)
        raw = sorted(set(keys.values()))
        npar = len(dirs)
        hess = np.zeros((npar, npar))
        for p in range(npar):
            for q in range(p, npar):
                sec = vc.mixed_second(es, fo, p, q, raw)
                lin = {r: (sec[k][0], 0 * sec[k][0], sec[k][3]) for r, k in keys.items()}
                plus = {r: (sec[k][0], sec[k][1] + sec[k][2], 0 * sec[k][0]) for r, k in keys.items()}
                minus = {r: (sec[k][0], sec[k][1] - sec[k][2], 0 * sec[k][0]) for r, k in keys.items()}
                val = self.combine_second(lin, 0.0, model.omega) + 0.25 * (
                    self.combine_second(plus, 0.0, model.omega)
                    - self.combine_second(minus, 0.0, model.omega)
                )
                hess[p, q] = hess[q, p] = val
        return hess


class GateObjective(Objective):
    """Gate fidelity at t_f = pi/Omega minus a duration penalty p*t_f."""

    def __init__(self, target: np.ndarray, penalty: float = 0.0, *, include_omega: bool = False, modulus: bool = False):
        if penalty < 0:
            raise ValueError("penalty must be non-negative")
        self.target = np.asarray(target, dtype=complex)
        self.penalty = penalty
        self.include_omega = include_omega
        self.modulus = modulus
        self._req = Request(0, 1.0, locked=True)

    def requests(self):
        return [self._req]

    def combine(self, jets, grads, omega):
        u = jets[self._req]
        d = u.shape[0]
        z = np.vdot(u, self.target) / d
        f0 = abs(z) if self.modulus else z.real
        t_f = np.pi / omega
        fp = duration_penalty(self.penalty, t_f)
        parts = {"F0": float(f0), "Fp": float(fp), "t_f": t_f}
        if grads is None:
            return Evaluation(float(f0 - fp), None, parts)
        dz = np.einsum("pij,ij->p", grads[self._req].conj(), self.target) / d
        g = np.real(np.conj(z) / abs(z) * dz) if self.modulus else dz.real
        if self.include_omega:
            g[-1] -= duration_penalty_omega_grad(self.penalty, omega)
        return Evaluation(float(f0 - fp), g, parts)

    def combine_second(self, jets, c, omega):
        u, ub, ubb = jets[self._req]
        d = u.shape[0]
        if self.modulus:
            z = np.vdot(u, self.target) / d
            zb = np.vdot(ub, self.target) / d
            zbb = np.vdot(ubb, self.target) / d
            r = abs(z)
            f2 = (np.real(np.conj(zbb) * z) + abs(zb) ** 2) / r - np.real(np.conj(zb) * z) ** 2 / r**3
        else:
            f2 = np.real(np.vdot(ubb, self.target)) / d
        return f2 - self.penalty * 2 * np.pi * c**2 / omega**3


class TangleObjective(Objective):
    """Tangle of U(t)psi0 minus p * (d^2 C^2/dt^2)^2 at a fixed time."""

    def __init__(self, psi0: np.ndarray, time: float, penalty: float = 0.0):
        if penalty < 0:
            raise ValueError("penalty must be non-negative")
        psi0 = np.asarray(psi0, dtype=complex)
        if psi0.shape != (4,) or abs(np.linalg.norm(psi0) - 1) > 1e-10:
            raise ValueError("tangle objective needs a normalised two-qubit state")
        self.psi0 = psi0
        self.time = float(time)
        self.penalty = penalty
        self._req = [Request(n, self.time) for n in range(3)]

    def requests(self):
        return self._req

    def combine(self, jets, grads, omega):
        psi, psi1, psi2 = (jets[r] @ self.psi0 for r in self._req)
        c2, curv = tangle_and_curvature(psi, psi1, psi2)
        fp = self.penalty * curv**2
        parts = {"F0": c2, "Fp": fp, "curvature": curv}
        if grads is None:
            return Evaluation(c2 - fp, None, parts)
        S = SIGMA_YY
        z = psi @ S @ psi
        z1 = 2 * psi @ S @ psi1
        z2 = 2 * (psi1 @ S @ psi1 + psi @ S @ psi2)
        dpsi, dpsi1, dpsi2 = (grads[r] @ self.psi0 for r in self._req)
        dz = 2 * _bilinear(dpsi, psi)
        dz1 = 2 * (_bilinear(dpsi, psi1) + _bilinear(dpsi1, psi))
        dz2 = 2 * (2 * _bilinear(dpsi1, psi1) + _bilinear(dpsi, psi2) + _bilinear(dpsi2, psi))
        dc2 = 2 * np.real(np.conj(z) * dz)
        dcurv = 4 * np.real(np.conj(z1) * dz1) + 2 * np.real(np.conj(dz) * z2 + np.conj(z) * dz2)
        return Evaluation(c2 - fp, dc2 - 2 * self.penalty * curv * dcurv, parts)

    def combine_second(self, jets, c, omega):
        (u0, b0, bb0), (u1, b1, bb1), (u2, b2, bb2) = (jets[r] for r in self._req)
        p0, p1, p2 = u0 @ self.psi0, u1 @ self.psi0, u2 @ self.psi0
        q0, q1, q2 = b0 @ self.psi0, b1 @ self.psi0, b2 @ self.psi0
        r0, r1, r2 = bb0 @ self.psi0, bb1 @ self.psi0, bb2 @ self.psi0
        B = _bilinear
        z, z1, z2 = B(p0, p0), 2 * B(p0, p1), 2 * (B(p1, p1) + B(p0, p2))
        dz = 2 * B(q0, p0)
        dz1 = 2 * (B(q0, p1) + B(p0, q1))
        dz2 = 2 * (2 * B(q1, p1) + B(q0, p2) + B(p0, q2))
        ddz = 2 * (B(q0, q0) + B(p0, r0))
        ddz1 = 2 * (B(r0, p1) + 2 * B(q0, q1) + B(p0, r1))
        ddz2 = 2 * (2 * B(q1, q1) + 2 * B(p1, r1) + B(r0, p2) + 2 * B(q0, q2) + B(p0, r2))
        curv = 2 * abs(z1) ** 2 + 2 * np.real(np.conj(z) * z2)
        dcurv = 4 * np.real(np.conj(z1) * dz1) + 2 * np.real(np.conj(dz) * z2 + np.conj(z) * dz2)
        ddc2 = 2 * abs(dz) ** 2 + 2 * np.real(np.conj(z) * ddz)
        ddcurv = (
            4 * abs(dz1) ** 2
            + 4 * np.real(np.conj(z1) * ddz1)
            + 2 * np.real(np.conj(ddz) * z2 + 2 * np.conj(dz) * dz2 + np.conj(z) * ddz2)
        )
        return ddc2 - self.penalty * (2 * dcurv**2 + 2 * curv * ddcurv)


class ChainBoundObjective(Objective):
    """Purity lower bound 2Tr(rho_1N^2) - Tr(rho_1^2) - Tr(rho_N^2) at a fixed time."""

    def __init__(self, psi0: np.ndarray, n_spins: int, time: float):
        psi0 = np.asarray(psi0, dtype=complex)
        if psi0.shape != (2**n_spins,):
            raise ValueError("initial state does not match the spin count")
        self.psi0 = psi0
        self.n = n_spins
        self.time = float(time)
        self._req = Request(0, self.time)
        self._parts = (((0, n_spins - 1), 2.0), ((0,), -1.0), ((n_spins - 1,), -1.0))

    def requests(self):
        return [self._req]

    def _split(self, vecs: np.ndarray, keep) -> np.ndarray:
        """Reshape (..., 2**n) states to (..., d_keep, d_rest)."""
        n = self.n
        rest = [i for i in range(n) if i not in keep]
        lead = vecs.shape[:-1]
        t = vecs.reshape(lead + (2,) * n)
        off = len(lead)
        perm = list(range(off)) + [off + i for i in keep] + [off + i for i in rest]
        return np.transpose(t, perm).reshape(lead + (2 ** len(keep), -1))

    def combine(self, jets, grads, omega):
        psi = jets[self._req] @ self.psi0
        value = 0.0
        g = None if grads is None else 0.0
        dpsi = None if grads is None else grads[self._req] @ self.psi0
        for keep, coef in self._parts:
            a = self._split(psi, keep)
            rho = a @ a.conj().T
            value += coef * np.real(np.vdot(rho, rho))
            if grads is not None:
                x = self._split(dpsi, keep) @ a.conj().T
                # dTr(rho^2) = 2 Tr(rho d rho) = 4 Re Tr(rho X)
                g = g + coef * 4 * np.real(np.einsum("ij,pji->p", rho, x))
        return Evaluation(float(value), g, {"F0": float(value), "Fp": 0.0})

    def combine_second(self, jets, c, omega):
        u, ub, ubb = jets[self._req]
        psi, dpsi, ddpsi = u @ self.psi0, ub @ self.psi0, ubb @ self.psi0
        total = 0.0
        for keep, coef in self._parts:
            a, da, dda = (self._split(v, keep) for v in (psi, dpsi, ddpsi))
            rho = a @ a.conj().T
            drho = da @ a.conj().T + a @ da.conj().T
            ddrho = dda @ a.conj().T + 2 * da @ da.conj().T + a @ dda.conj().T
            total += coef * 2 * np.real(np.vdot(drho, drho) + np.vdot(rho, ddrho))
        return total


class MultiTimeAverage(Objective):
    """Arithmetic mean of member objectives evaluated on one model."""

    def __init__(self, members: Sequence[Objective]):
        if not members:
            raise ValueError("need at least one member objective")
        self.members = list(members)
        self.include_omega = self.members[0].include_omega

    def requests(self):
        seen = []
        for m in self.members:
            seen.extend(r for r in m.requests() if r not in seen)
        return seen

    def combine(self, jets, grads, omega):
        evs = [m.combine(jets, grads, omega) for m in self.members]
        return _mean(evs)

    def combine_second(self, jets, c, omega):
        return float(np.mean([m.combine_second(jets, c, omega) for m in self.members]))


def _mean(evs: Sequence[Evaluation]) -> Evaluation:
    n = len(evs)
    value = sum(e.value for e in evs) / n
    grad = None if evs[0].grad is None else sum(e.grad for e in evs) / n
    return Evaluation(value, grad, _merge_parts(evs, [1.0 / n] * n))


def _merge_parts(evs: Sequence[Evaluation], weights) -> dict:
    parts = {}
    for k in evs[0].parts:
        if k == "defect":
            parts[k] = max(e.parts[k] for e in evs)
        else:
            parts[k] = float(sum(w * e.parts[k] for w, e in zip(weights, evs)))
    return parts


@dataclass(frozen=True)
class EnsembleSpec:
    """Relative coupling errors g(1+u), u ~ Uniform[-error, error] per coupling."""

    base: ChainParams
    error: float
    members: int
    seed: int = 0

    def __post_init__(self):
        if self.error < 0:
            raise ValueError("relative error must be non-negative")
        if self.members < 1:
            raise ValueError("ensemble needs at least one member")

    def configurations(self, stream: str = "train") -> list[ChainParams]:
        rng = rng_for(self.seed, "ensemble", stream)
        nb = len(self.base.gx)
        out = []
        for _ in range(self.members):
            u = rng.uniform(-self.error, self.error, size=(2, nb))
            out.append(self.base.scaled_couplings(1 + u[0], 1 + u[1]))
        return out


class EnsembleObjective(Objective):
    """Mean of ``inner`` over member drifts, reduced in member order."""

    def __init__(self, inner: Objective, drifts: Sequence[np.ndarray], weights: Sequence[float] | None = None):
        if not drifts:
            raise ValueError("ensemble needs at least one member")
        self.inner = inner
        self.drifts = [np.asarray(h, dtype=complex) for h in drifts]
        w = np.full(len(drifts), 1.0 / len(drifts)) if weights is None else np.asarray(weights, float)
        if abs(w.sum() - 1) > 1e-12:
            raise ValueError("ensemble weights must sum to one")
        self.weights = w
        self.include_omega = inner.include_omega

    @classmethod
    def from_spec(cls, inner: Objective, spec: EnsembleSpec, stream: str = "train"):
        return cls(inner, [chain_hamiltonian(p) for p in spec.configurations(stream)])

    def requests(self):
        return self.inner.requests()

    def evaluate(self, model, nu_max=None, *, grad=True):
        def one(h):
            return self.inner.evaluate(model.with_drift(h), nu_max, grad=grad)

        workers = min(worker_count(), len(self.drifts))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                evs = list(pool.map(one, self.drifts))
        else:
            evs = [one(h) for h in self.drifts]
        value = float(sum(w * e.value for w, e in zip(self.weights, evs)))
        g = None if not grad else sum(w * e.grad for w, e in zip(self.weights, evs))
        return Evaluation(value, g, _merge_parts(evs, self.weights))

    def directional_curvature(self, model, b, nu_max=None):
        return float(sum(
            w * self.inner.directional_curvature(model.with_drift(h), b, nu_max)
            for w, h in zip(self.weights, self.drifts)
        ))
