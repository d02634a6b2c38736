"""Drivers for the three control experiments: gate in minimal time,
entanglement plateaus, and end-spin entanglement in chains.

The drivers return plain result objects; writing files is left to the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from . import floquet as fq
from . import optimizer as op
from . import spinsys as ss
from .objectives import (
    ChainBoundObjective,
    EnsembleObjective,
    EnsembleSpec,
    GateObjective,
    MultiTimeAverage,
    TangleObjective,
    gate_fidelity,
)
from .seeding import rng_for
from .validation import end_spin_controls

PLATEAU_LEVEL = 0.999


def sample_times(horizon: float, n: int = 1000) -> np.ndarray:
    return np.linspace(0.0, horizon, n)


def _nu(model: fq.ControlModel, nu_max: int | str | None) -> int:
    if nu_max in (None, "auto"):
        return fq.default_nu_max(model.n_max)
    return int(nu_max)


SEARCH_DEFECT = 1e-6
REPORT_DEFECT = 1e-10


def _adaptive(nu_max) -> float | None:
    # a fixed nu_max from the user is honoured; "auto" lets the problem grow it
    return SEARCH_DEFECT if nu_max in (None, "auto") else None


def resolved_nu(model: fq.ControlModel, nu_max: int, auto: bool = True, *, tol: float = REPORT_DEFECT, cap: int = 256) -> int:
    """Double ``nu_max`` until the completeness defect of ``model`` is below ``tol``.

    Optimisation runs at a looser defect; reported numbers use this one.
    Returns ``nu_max`` unchanged when ``auto`` is False.
    """
    if not auto:
        return nu_max
    while 2 * nu_max <= cap and fq.solve(model, nu_max).completeness_defect() > tol:
        nu_max *= 2
    return nu_max


def _seeded_start(problem: op.Problem, g_max: float, cfg: op.OptimizerConfig, restart: int) -> np.ndarray:
    return op.initial_theta(problem, g_max, cfg.init_scale, rng_for(cfg.seed, "init", restart))


# ---------------------------------------------------------------- gates


@dataclass
class GateResult:
    model: fq.ControlModel
    drift_model: fq.ControlModel
    target: np.ndarray
    f0: float
    t_f: float
    feasible: bool
    trace: op.OptimizationTrace
    restart: int
    nu_max: int


def gate_min_time(
    params: ss.TwoSpinParams,
    alpha: Sequence[float],
    *,
    n_max: int = 6,
    t_f0: float = 0.2,
    config: op.OptimizerConfig,
    nu_max: int | str | None = "auto",
    theta0: np.ndarray | None = None,
) -> GateResult:
    """Minimal-time search for the canonical gate; keeps the shortest feasible run.

    Restarts stop at the first run that meets ``config.f_thr``.
    """
    drift = ss.two_spin_hamiltonian(params)
    target = ss.canonical_gate(alpha)
    base = fq.ControlModel.zero(drift, end_spin_controls(2), n_max, np.pi / t_f0)
    tol = _adaptive(nu_max)
    best = None
    for r in range(max(config.restarts, 1)):
        problem = op.Problem(
            base, GateObjective(target, include_omega=True), _nu(base, nu_max), truncation_tol=tol,
        )
        th0 = theta0 if (theta0 is not None and r == 0) else _seeded_start(problem, params.g_max, config, r)
        cfg = replace(config, seed=int(rng_for(config.seed, "restart", r).integers(2**31)))
        res = op.minimal_time_search(problem, cfg, th0)
        key = (res.feasible, -res.t_f if res.feasible else res.f0)
        if best is None or key > best[0]:
            best = (key, res, r, problem)
        if res.feasible:
            break
    _, res, r, problem = best
    model = problem.model_at(res.theta)
    nu_f = resolved_nu(model, problem.nu_max, tol is not None)
    f0 = GateObjective(target).evaluate(model, nu_f, grad=False).parts["F0"]
    return GateResult(model, base.with_omega(model.omega), target, f0, res.t_f, f0 >= config.f_thr, res.trace, r, nu_f)


def gate_infidelity_series(model: fq.ControlModel, target: np.ndarray, times: np.ndarray, nu_max: int) -> np.ndarray:
    es = fq.solve(model, nu_max)
    return np.array([1.0 - gate_fidelity(fq.propagator(es, t), target) for t in times])


# ------------------------------------------------------------- plateaus


def plateau_width(
    es: fq.FloquetEigensystem,
    psi0: np.ndarray,
    center: float,
    *,
    level: float = PLATEAU_LEVEL,
    step: float = 5e-4,
    span: float | None = None,
) -> tuple[float, float]:
    """Edges of the contiguous interval around ``center`` with C^2 > level.

    Scans outward on a grid of ``step`` µs and refines each crossing with
    Brent's method.  Returns ``(center, center)`` when C^2(center) <= level.
    """
    def excess(t):
        return ss.tangle_pure(fq.propagator(es, t) @ psi0) - level

    if excess(center) <= 0:
        return center, center
    span = center if span is None else span
    edges = []
    for sign in (-1.0, 1.0):
        t_in = center
        while True:
            t_out = t_in + sign * step
            if abs(t_out - center) > span or t_out < 0:
                edges.append(t_in)
                break
            if excess(t_out) <= 0:
                edges.append(brentq(excess, min(t_in, t_out), max(t_in, t_out), xtol=1e-12))
                break
            t_in = t_out
    return edges[0], edges[1]


@dataclass
class PulseOutcome:
    label: str
    model: fq.ControlModel
    c2: float
    curvature: float
    plateau: tuple[float, float]
    max_amplitude: float
    trace: op.OptimizationTrace

    @property
    def width(self) -> float:
        return self.plateau[1] - self.plateau[0]


@dataclass
class PlateauResult:
    t_f: float
    psi0: np.ndarray
    drift_model: fq.ControlModel
    pulses: list[PulseOutcome]
    nu_max: int


def _tangle_outcome(label, problem, theta, trace, psi0, t_f, auto) -> PulseOutcome:
    model = problem.model_at(theta)
    nu_max = resolved_nu(model, problem.nu_max, auto)
    single = TangleObjective(psi0, t_f).evaluate(model, nu_max, grad=False)
    es = fq.solve(model, nu_max)
    return PulseOutcome(
        label, model, single.parts["F0"], single.parts["curvature"],
        plateau_width(es, psi0, t_f), float(np.abs(model.amplitudes).max()), trace,
    )


def tangle_plateau(
    params: ss.TwoSpinParams,
    state: ss.BlochProductState,
    *,
    t_f: float,
    n_max: int = 6,
    penalty: float = 1e-4,
    extra_times: Sequence[float] = (),
    config: op.OptimizerConfig,
    nu_max: int | str | None = "auto",
) -> PlateauResult:
    """Peak-only pulse, then curvature-penalised pulse warm-started from it.

    With ``extra_times`` a third pulse maximises the mean penalised tangle
    over ``t_f`` and the extra times.  It is warm-started from the peak
    pulse: started from the curvature-penalised pulse, the ascent stays in
    that pulse's narrow plateau.
    """
    psi0 = ss.bloch_product_state(state)
    base = fq.ControlModel.zero(ss.two_spin_hamiltonian(params), end_spin_controls(2), n_max, np.pi / t_f)
    nu = _nu(base, nu_max)
    tol = _adaptive(nu_max)

    def optimise(objective, theta0):
        problem = op.Problem(base, objective, nu, truncation_tol=tol)
        best, trace = op.run(problem, config, theta0)
        return problem, best, trace

    problem = op.Problem(base, TangleObjective(psi0, t_f), nu, truncation_tol=tol)
    best_start, best_val = None, -np.inf
    for r in range(max(config.restarts, 1)):
        th0 = _seeded_start(problem, params.g_max, config, r)
        pr, th, tr = optimise(TangleObjective(psi0, t_f), th0)
        val = pr(th, grad=False).value
        if val > best_val:
            best_start, best_val, peak = th, val, (pr, th, tr)
    auto = tol is not None
    pulses = [_tangle_outcome("peak", *peak, psi0, t_f, auto)]
    pr, th, tr = optimise(TangleObjective(psi0, t_f, penalty), best_start)
    pulses.append(_tangle_outcome("curvature", pr, th, tr, psi0, t_f, auto))
    if extra_times:
        members = [TangleObjective(psi0, t, penalty) for t in (t_f, *extra_times)]
        pr, th, tr = optimise(MultiTimeAverage(members), best_start)
        pulses.append(_tangle_outcome("multi_time", pr, th, tr, psi0, t_f, auto))
    nu_final = max(resolved_nu(p.model, nu, auto) for p in pulses)
    return PlateauResult(t_f, psi0, base, pulses, nu_final)


def tangle_series(model: fq.ControlModel, psi0: np.ndarray, times: np.ndarray, nu_max: int) -> np.ndarray:
    es = fq.solve(model, nu_max)
    return np.array([ss.tangle_pure(fq.propagator(es, t) @ psi0) for t in times])


# ---------------------------------------------------------------- chains


def end_spin_eof(model: fq.ControlModel, psi0: np.ndarray, times, nu_max: int) -> np.ndarray:
    n = int(round(np.log2(model.dim)))
    es = fq.solve(model, nu_max)
    return np.array([
        ss.eof_wootters(ss.reduced_density(fq.propagator(es, t) @ psi0, (1, n))) for t in np.atleast_1d(times)
    ])


@dataclass
class RobustnessRow:
    error: float
    nominal_mean: float
    nominal_std: float
    robust_mean: float
    robust_std: float
    train_value: float


@dataclass
class ChainResult:
    params: ss.ChainParams
    psi0: np.ndarray
    model: fq.ControlModel
    drift_model: fq.ControlModel
    bound: float
    eof_final: float
    trace: op.OptimizationTrace
    nu_max: int
    robustness: list[RobustnessRow] = field(default_factory=list)
    robust_models: dict = field(default_factory=dict)


def ensemble_eof(
    model: fq.ControlModel, psi0: np.ndarray, configs: Sequence[ss.ChainParams], nu_max: int
) -> np.ndarray:
    """Final end-spin EoF of one pulse applied to each coupling configuration."""
    return np.array([
        end_spin_eof(model.with_drift(ss.chain_hamiltonian(c)), psi0, model.t_final, nu_max)[0] for c in configs
    ])


def chain_entangle(
    params: ss.ChainParams,
    state: ss.BlochProductState,
    *,
    t_f: float,
    n_max: int = 6,
    config: op.OptimizerConfig,
    nu_max: int | str | None = "auto",
    errors: Sequence[float] = (),
    train_members: int = 10,
    test_members: int = 100,
    target: float = 1 - 1e-5,
) -> ChainResult:
    """Maximise the end-spin lower bound; optionally train ensemble-robust pulses.

    Robust pulses start from the nominal optimum.  Test ensembles use a
    separate random stream from the training ensembles.
    """
    n = params.n_spins
    psi0 = ss.bloch_product_state(state)
    base = fq.ControlModel.zero(ss.chain_hamiltonian(params), end_spin_controls(n), n_max, np.pi / t_f)
    nu = _nu(base, nu_max)
    tol = _adaptive(nu_max)

    def stop_at_target(it, theta, ev):
        return ev.value >= target + 1e-7

    best = None
    for r in range(max(config.restarts, 1)):
        problem = op.Problem(base, ChainBoundObjective(psi0, n, t_f), nu, truncation_tol=tol)
        th, trace = op.run(problem, config, _seeded_start(problem, params.g_max, config, r), callback=stop_at_target)
        val = problem(th, grad=False).value
        if best is None or val > best[0]:
            best = (val, problem, th, trace)
        if val >= target:
            break
    _, problem, theta, trace = best
    model = problem.model_at(theta)
    nu_run = resolved_nu(model, problem.nu_max, tol is not None)
    bound = ChainBoundObjective(psi0, n, t_f).evaluate(model, nu_run, grad=False).value
    out = ChainResult(
        params, psi0, model, base, bound,
        float(end_spin_eof(model, psi0, t_f, nu_run)[0]), trace, nu_run,
    )
    for eps in errors:
        train = EnsembleSpec(params, eps, train_members, config.seed)
        test = EnsembleSpec(params, eps, test_members, config.seed).configurations("test")
        objective = EnsembleObjective.from_spec(ChainBoundObjective(psi0, n, t_f), train)
        rp = op.Problem(base, objective, problem.nu_max, truncation_tol=tol)
        r_theta, _ = op.run(rp, config, theta)
        r_model = rp.model_at(r_theta)
        nu_eval = max(nu_run, resolved_nu(r_model, rp.nu_max, tol is not None))
        nom = ensemble_eof(model, psi0, test, nu_eval)
        rob = ensemble_eof(r_model, psi0, test, nu_eval)
        out.robustness.append(RobustnessRow(
            eps, float(nom.mean()), float(nom.std()), float(rob.mean()), float(rob.std()),
            float(rp(r_theta, grad=False).value),
        ))
        out.robust_models[eps] = r_model
    return out
