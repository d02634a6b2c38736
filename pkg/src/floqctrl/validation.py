"""Oracle suites: Floquet results checked against independent routes.

Each suite returns a :class:`SuiteResult` with the worst measured defect.
The oracles are an adaptive Runge-Kutta integrator, central finite
differences, matrix exponentials of the drift, and algebraic invariants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import floquet as fq
from . import spinsys as ss
from . import varcalc as vc
from .objectives import ChainBoundObjective, GateObjective, TangleObjective
from .seeding import rng_for

# the smallest derivatives (~1e-4) need the larger step to beat eigenvalue round-off
FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    defect: float
    tolerance: float
    cases: int
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def random_model(
    rng: np.random.Generator,
    n_spins: int = 2,
    n_max: int = 6,
    amp_scale: float = 0.5,
) -> fq.ControlModel:
    """Random chain with end-spin x/y controls; amplitudes ~ U[-1, 1]*amp_scale*g_max."""
    nb = n_spins - 1
    params = ss.ChainParams(
        tuple(rng.uniform(0.1, 1.0, n_spins)),
        tuple(rng.uniform(0.5, 5.0, nb)),
        tuple(rng.uniform(0.5, 5.0, nb)),
    )
    controls = end_spin_controls(n_spins)
    amps = rng.uniform(-1, 1, (len(controls), n_max)) * amp_scale * params.g_max
    t_f = rng.uniform(0.1, 0.4)
    return fq.ControlModel(ss.chain_hamiltonian(params), controls, amps, np.pi / t_f)


def end_spin_controls(n_spins: int) -> tuple[np.ndarray, ...]:
    """sigma_x, sigma_y on site 1 and on site N (both sites for two spins)."""
    return tuple(ss.pauli(a, s, n_spins) for s in (1, n_spins) for a in "xy")


def _rel(fd: np.ndarray, an: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.abs(fd - an).max() / max(np.abs(an).max(), floor))


def _shift(model: fq.ControlModel, p: int, h: float) -> fq.ControlModel:
    if p == model.amplitudes.size:
        return model.with_omega(model.omega + h)
    a = model.amplitudes.ravel().copy()
    a[p] += h
    return model.with_amplitudes(a.reshape(model.amplitudes.shape))


def _match(es: fq.FloquetEigensystem, other: fq.FloquetEigensystem) -> np.ndarray:
    """Full-spectrum index in ``other`` of each selected mode of ``es``, by overlap."""
    ov = np.abs(es.vectors.conj().T @ other.full_vectors)
    return np.argmax(ov, axis=1)


def _slopes(es: fq.FloquetEigensystem, idx: np.ndarray, direction: vc.Direction) -> np.ndarray:
    v = es.full_vectors[:, idx]
    return np.einsum("ak,ak->k", v.conj(), direction.apply(v, es.nu_max, es.dim_sys)).real


def _projectors(es: fq.FloquetEigensystem, idx: np.ndarray) -> np.ndarray:
    v = es.full_vectors[:, idx]
    return np.einsum("ak,bk->kab", v, v.conj())


def derivative_check(model: fq.ControlModel, nu_max: int, params: list[int], t: float) -> dict:
    """Worst relative error (best FD step) of each analytic derivative family."""
    es = fq.solve(model, nu_max)
    dirs = vc.parameter_directions(model, include_omega=True)
    sel = [dirs[p] for p in params]
    fo = vc.first_order(es, sel)
    reqs = [(0, t), (1, t), (2, t)]
    bundle = vc.propagator_gradient(es, fo, reqs)
    own = np.arange(es.dim_sys)
    worst = {"d_eps": 0.0, "d_chi": 0.0, "dU": 0.0, "d2_eps": 0.0, "dt_U": 0.0}
    for j, p in enumerate(params):
        d_proj = np.stack([
            np.outer(fo.d_chi(es, j)[:, k], es.vectors[:, k].conj())
            + np.outer(es.vectors[:, k], fo.d_chi(es, j)[:, k].conj())
            for k in own
        ])
        d2 = np.array([vc.second_derivatives(es, sel[j], sel[j], k)[0] for k in own])
        best = {k: np.inf for k in ("d_eps", "d_chi", "dU", "d2_eps")}
        for h in FD_STEPS:
            ep, em = fq.solve(_shift(model, p, h), nu_max), fq.solve(_shift(model, p, -h), nu_max)
            ip, im = _match(es, ep), _match(es, em)
            best["d_eps"] = min(best["d_eps"], _rel((ep.full_energies[ip] - em.full_energies[im]) / (2 * h), fo.d_eps[j]))
            best["d_chi"] = min(best["d_chi"], _rel((_projectors(ep, ip) - _projectors(em, im)) / (2 * h), d_proj))
            err = max(
                _rel((fq.time_derivative(ep, tt, n) - fq.time_derivative(em, tt, n)) / (2 * h), bundle.grads[(n, tt)][j])
                for n, tt in reqs
            )
            best["dU"] = min(best["dU"], err)
            fd2 = (_slopes(ep, ip, sel[j]) - _slopes(em, im, sel[j])) / (2 * h)
            best["d2_eps"] = min(best["d2_eps"], _rel(fd2, d2))
        for k, v in best.items():
            worst[k] = max(worst[k], v)
    dt_best = np.inf
    for h in FD_STEPS:
        err = max(
            _rel((fq.time_derivative(es, t + h, n - 1) - fq.time_derivative(es, t - h, n - 1)) / (2 * h), fq.time_derivative(es, t, n))
            for n in (1, 2)
        )
        dt_best = min(dt_best, err)
    worst["dt_U"] = dt_best
    return worst


def objective_gradient_check(objective, model: fq.ControlModel, nu_max: int) -> float:
    """Worst relative gradient error over all parameters, best FD step each."""
    ev = objective.evaluate(model, nu_max)
    theta = model.amplitudes.size + (1 if objective.include_omega else 0)
    fd = np.empty(theta)
    for p in range(theta):
        cands = []
        for h in FD_STEPS:
            fp = objective.evaluate(_shift(model, p, h), nu_max, grad=False).value
            fm = objective.evaluate(_shift(model, p, -h), nu_max, grad=False).value
            cands.append((fp - fm) / (2 * h))
        fd[p] = min(cands, key=lambda c: abs(c - ev.grad[p]))
    return _rel(fd, ev.grad)


def _converged_nu(model: fq.ControlModel, nu_max: int | None) -> int:
    return fq.adaptive_truncation(model, 1e-11) * 2 if nu_max is None else nu_max


def suite_ode(seed: int, n_two: int = 20, n_three: int = 5, tol: float = 1e-8, nu_max: int | None = None) -> SuiteResult:
    """Floquet propagator against the Runge-Kutta oracle at t_f and a random time."""
    rng = rng_for(seed, "validate", "ode")
    worst, per = 0.0, []
    for n_spins, count in ((2, n_two), (3, n_three)):
        for _ in range(count):
            model = random_model(rng, n_spins)
            nu = _converged_nu(model, nu_max)
            es = fq.solve(model, nu)
            for t in (model.t_final, rng.uniform(0, 2 * model.t_final)):
                err = float(np.abs(fq.propagator(es, t) - fq.ode_oracle(model, t)).max())
                per.append(err)
                worst = max(worst, err)
    return SuiteResult("propagator_vs_ode", worst < tol, worst, tol, len(per), {"max_per_case": per})


def suite_derivatives(seed: int, n_instances: int = 30, tol: float = 1e-5, nu_max: int | None = None) -> SuiteResult:
    """Analytic first/second derivatives and time derivatives against finite differences."""
    rng = rng_for(seed, "validate", "derivatives")
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        model = random_model(rng, 2, n_max=3, amp_scale=0.3)
        nu = _converged_nu(model, nu_max)
        n_amp = model.amplitudes.size
        params = sorted(set(rng.choice(n_amp, 2, replace=False).tolist())) + [n_amp]
        t = float(rng.uniform(0.2, 1.5) * model.t_final)
        for k, v in derivative_check(model, nu, params, t).items():
            worst[k] = max(worst.get(k, 0.0), v)
    defect = max(worst.values())
    return SuiteResult("derivatives_vs_fd", defect < tol, defect, tol, n_instances, worst)


def suite_objective_gradients(seed: int, n_instances: int = 5, tol: float = 1e-5, nu_max: int | None = None) -> SuiteResult:
    """Gate, tangle and chain-bound gradients against finite differences."""
    rng = rng_for(seed, "validate", "objectives")
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        m2 = random_model(rng, 2, n_max=3, amp_scale=0.3)
        nu2 = _converged_nu(m2, nu_max)
        psi2 = ss.bloch_product_state(ss.BlochProductState(tuple(rng.uniform(0, np.pi, 2)), tuple(rng.uniform(0, 2 * np.pi, 2))))
        target = ss.canonical_gate(rng.uniform(0, np.pi / 2, 3))
        checks = {
            "gate": (GateObjective(target, 0.05, include_omega=True), m2, nu2),
            "tangle": (TangleObjective(psi2, float(rng.uniform(0.5, 1.0) * m2.t_final), 1e-3), m2, nu2),
        }
        m3 = random_model(rng, 3, n_max=2, amp_scale=0.3)
        psi3 = ss.bloch_product_state(ss.BlochProductState(tuple(rng.uniform(0, np.pi, 3)), tuple(rng.uniform(0, 2 * np.pi, 3))))
        checks["chain"] = (ChainBoundObjective(psi3, 3, m3.t_final), m3, _converged_nu(m3, nu_max))
        for name, (obj, model, nu) in checks.items():
            worst[name] = max(worst.get(name, 0.0), objective_gradient_check(obj, model, nu))
    defect = max(worst.values())
    return SuiteResult("objective_gradients_vs_fd", defect < tol, defect, tol, n_instances, worst)


def suite_truncation(seed: int, tol: float = 1e-8, nu_max: int | None = None) -> SuiteResult:
    """U(t_f) at nu_max against 2*nu_max for a strongly driven model."""
    rng = rng_for(seed, "validate", "truncation")
    model = random_model(rng, 2, n_max=6 if nu_max is None else min(6, nu_max), amp_scale=2.0)
    sweep = {}
    if nu_max is None:
        nu = fq.adaptive_truncation(model, tol)
        for n in (nu // 4, nu // 2, nu):
            if n >= 1:
                sweep[n] = float(np.abs(fq.propagator(fq.solve(model, n), model.t_final) - fq.propagator(fq.solve(model, 2 * n), model.t_final)).max())
    else:
        nu = nu_max
        sweep[nu] = float(np.abs(fq.propagator(fq.solve(model, nu), model.t_final) - fq.propagator(fq.solve(model, 2 * nu), model.t_final)).max())
    defect = sweep[nu]
    return SuiteResult("truncation_convergence", defect < tol, defect, tol, len(sweep), {"defect_by_nu_max": {str(k): v for k, v in sweep.items()}})


def suite_invariants(seed: int, n_instances: int = 10, nu_max: int | None = None) -> SuiteResult:
    """Unitarity, Hermiticity, zone completeness, lower-bound property, gauge robustness."""
    rng = rng_for(seed, "validate", "invariants")
    tol = {"unitarity": 1e-10, "hermiticity": 1e-14, "completeness": 1e-8, "lower_bound": 1e-9, "gauge": 1e-10}
    worst = dict.fromkeys(tol, 0.0)
    for _ in range(n_instances):
        model = random_model(rng, 2)
        nu = _converged_nu(model, nu_max)
        k = fq.assemble(model, nu)
        worst["hermiticity"] = max(worst["hermiticity"], float(np.abs(k.matrix - k.matrix.conj().T).max()))
        es = fq.eigensystem(k)
        worst["completeness"] = max(worst["completeness"], es.completeness_defect())
        if es.selected.size != es.dim_sys:
            worst["completeness"] = np.inf
        for t in rng.uniform(0, 3 * model.t_final, 3):
            u = fq.propagator(es, t)
            worst["unitarity"] = max(worst["unitarity"], float(np.abs(u.conj().T @ u - np.eye(es.dim_sys)).max()))
        dirs = vc.parameter_directions(model, include_omega=True)
        t = model.t_final
        g1 = vc.propagator_gradient(es, vc.first_order(es, dirs), [(0, t)]).grads[(0, t)]
        es2 = es.regauged(rng.uniform(0, 2 * np.pi, es.dim_sys))
        g2 = vc.propagator_gradient(es2, vc.first_order(es2, dirs), [(0, t)]).grads[(0, t)]
        worst["gauge"] = max(worst["gauge"], float(np.abs(g1 - g2).max()))
        for n_spins in (3, 4):
            psi = rng.normal(size=2**n_spins) + 1j * rng.normal(size=2**n_spins)
            psi /= np.linalg.norm(psi)
            rho = ss.reduced_density(psi, (1, n_spins))
            excess = ss.tangle_lower_bound(psi) - ss.concurrence(rho) ** 2
            worst["lower_bound"] = max(worst["lower_bound"], float(excess))
    passed = all(worst[k] < tol[k] for k in tol)
    defect = max(worst[k] / tol[k] for k in tol)
    return SuiteResult("invariants", passed, defect, 1.0, n_instances, {"worst": worst, "tolerances": tol})


def suite_drift_only(seed: int, tol: float = 1e-10, nu_max: int | None = None) -> SuiteResult:
    """Zero control: Floquet propagator equals exp(-i H t)."""
    rng = rng_for(seed, "validate", "drift")
    worst = 0.0
    count = 0
    for n_spins in (2, 3, 4):
        model = random_model(rng, n_spins, amp_scale=0.0)
        es = fq.solve(model, 8 if nu_max is None else nu_max)
        for t in rng.uniform(0, 3 * model.t_final, 3):
            u = scipy.linalg.expm(-1j * model.drift * t)
            worst = max(worst, float(np.abs(fq.propagator(es, t) - u).max()))
            count += 1
    return SuiteResult("drift_only_closed_form", worst < tol, worst, tol, count)


SUITES = {
    "ode": suite_ode,
    "derivatives": suite_derivatives,
    "objective_gradients": suite_objective_gradients,
    "truncation": suite_truncation,
    "invariants": suite_invariants,
    "drift_only": suite_drift_only,
}


def run_all(seed: int = 0, nu_max: int | None = None, **sizes) -> list[SuiteResult]:
    """Run every suite; ``sizes`` maps suite name to keyword overrides."""
    out = []
    for name, fn in SUITES.items():
        try:
            out.append(fn(seed, nu_max=nu_max, **sizes.get(name, {})))
        except Exception as exc:  # a crashing suite counts as a failure
            out.append(SuiteResult(name, False, float("inf"), 0.0, 0, {"error": f"{type(exc).__name__}: {exc}"}))
    return out
