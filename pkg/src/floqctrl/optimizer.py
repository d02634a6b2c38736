"""Ascent on pulse parameters with exact gradients.

Steps are quasi-Newton (BFGS on -F) or plain gradient directions, each
followed by a backtracking line search that enforces sufficient increase.
Directional curvature, when enabled, sets the trial step length.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import floquet as fq
from .objectives import Evaluation, GateObjective, Objective
from .parallel import worker_count
from .seeding import rng_for
from .varcalc import DegenerateMode

log = logging.getLogger(__name__)


class LineSearchFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    grad_tol: float = 1e-10
    step_tol: float = 1e-13
    direction: str = "bfgs"
    use_curvature: bool = False
    penalty0: float = 0.01
    penalty_growth: float = 1.5
    penalty_decay: float | None = None
    f_thr: float | None = None
    amplitude_bound: float | None = None
    omega_bounds: tuple[float, float] | None = None
    max_omega_step: float = 0.05
    max_amplitude_step: float | None = None
    jitter_scale: float = 1e-3
    max_jitters: int = 5
    restarts: int = 1
    seed: int = 0
    init_scale: float = 0.1
    max_backtracks: int = 30
    shrink: float = 0.5
    armijo: float = 1e-4
    stall_iters: int = 0
    stall_tol: float = 1e-7
    hold_omega: bool = True

    def __post_init__(self):
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty growth factor must exceed 1")
        if self.penalty_decay is not None and not 0 < self.penalty_decay < 1:
            raise ValueError("penalty decay factor must lie in (0, 1)")
        if self.stall_iters < 0:
            raise ValueError("stall_iters must be non-negative")
        if self.direction not in ("bfgs", "gradient"):
            raise ValueError(f"unknown search direction {self.direction!r}")


@dataclass
class TraceRow:
    iter: int
    F: float
    F0: float
    Fp: float
    t_f: float
    grad_norm: float
    max_amp: float
    penalty: float = 0.0


@dataclass
class OptimizationTrace:
    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iter <= self.rows[-1].iter:
            raise ValueError("trace iterations must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


class Problem:
    """Maps a flat parameter vector onto a control model and evaluates ``objective``.

    The vector holds the amplitude table row-major, then Omega when
    ``objective.include_omega`` is set.
    """

    def __init__(
        self,
        model: fq.ControlModel,
        objective: Objective,
        nu_max: int | None = None,
        *,
        truncation_tol: float | None = 1e-8,
        nu_cap: int = 256,
    ):
        self.model = model
        self.objective = objective
        self.nu_max = nu_max if nu_max is not None else fq.default_nu_max(model.n_max)
        self.n_amp = model.amplitudes.size
        self.truncation_tol = truncation_tol
        self.nu_cap = nu_cap

    @property
    def include_omega(self) -> bool:
        return self.objective.include_omega

    def theta(self, model: fq.ControlModel | None = None) -> np.ndarray:
        m = self.model if model is None else model
        th = m.amplitudes.ravel().copy()
        return np.append(th, m.omega) if self.include_omega else th

    def model_at(self, theta: np.ndarray) -> fq.ControlModel:
        m = self.model.with_amplitudes(theta[:self.n_amp].reshape(self.model.amplitudes.shape))
        return m.with_omega(float(theta[self.n_amp])) if self.include_omega else m

    def __call__(self, theta: np.ndarray, grad: bool = True) -> Evaluation:
        """Evaluate; doubles nu_max while the completeness defect exceeds tolerance."""
        model = self.model_at(theta)
        while True:
            ev = self.objective.evaluate(model, self.nu_max, grad=grad)
            if (
                self.truncation_tol is None
                or ev.parts["defect"] <= self.truncation_tol
                or 2 * self.nu_max > self.nu_cap
            ):
                return ev
            self.nu_max *= 2
            log.info("completeness defect %.2e: nu_max raised to %d", ev.parts["defect"], self.nu_max)

    def curvature(self, theta: np.ndarray, b: np.ndarray) -> float:
        return self.objective.directional_curvature(self.model_at(theta), b, self.nu_max)


@dataclass
class StepState:
    hinv: np.ndarray | None = None
    last_step: float = 1.0
    converged: bool = False
    scaled: bool = False
    frozen: np.ndarray | None = None


def _project(theta: np.ndarray, problem: Problem, cfg: OptimizerConfig) -> np.ndarray:
    th = theta.copy()
    if cfg.amplitude_bound is not None:
        th[:problem.n_amp] = np.clip(th[:problem.n_amp], -cfg.amplitude_bound, cfg.amplitude_bound)
    if problem.include_omega and cfg.omega_bounds is not None:
        th[problem.n_amp] = np.clip(th[problem.n_amp], *cfg.omega_bounds)
    return th


def _blocked(theta: np.ndarray, d: np.ndarray, problem: Problem, cfg: OptimizerConfig) -> np.ndarray:
    """Coordinates sitting on a bound whose direction points outward."""
    out = np.zeros(theta.size, bool)
    if cfg.amplitude_bound is not None:
        a, da = theta[:problem.n_amp], d[:problem.n_amp]
        b = cfg.amplitude_bound * (1 - 1e-12)
        out[:problem.n_amp] = ((a >= b) & (da > 0)) | ((a <= -b) & (da < 0))
    if problem.include_omega and cfg.omega_bounds is not None:
        lo, hi = cfg.omega_bounds
        w, dw = theta[problem.n_amp], d[problem.n_amp]
        out[problem.n_amp] = (w <= lo * (1 + 1e-12) and dw < 0) or (w >= hi * (1 - 1e-12) and dw > 0)
    return out


def jitter(theta: np.ndarray, n_amp: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb amplitudes by Uniform[-scale, scale] * max(|a|, 1)."""
    th = theta.copy()
    amax = max(float(np.abs(th[:n_amp]).max(initial=0.0)), 1.0)
    th[:n_amp] += rng.uniform(-scale, scale, n_amp) * amax
    return th


def step(
    theta: np.ndarray,
    ev: Evaluation,
    problem: Problem,
    cfg: OptimizerConfig,
    state: StepState,
) -> tuple[np.ndarray, Evaluation]:
    """One accepted ascent step; F never decreases across it."""
    g = ev.grad if state.frozen is None else np.where(state.frozen, 0.0, ev.grad)
    if np.linalg.norm(g) < cfg.grad_tol:
        state.converged = True
        return theta, ev
    if cfg.direction == "bfgs":
        if state.hinv is None:
            state.hinv = np.eye(g.size)
        d = state.hinv @ g
        if d @ g <= 0:
            state.hinv = np.eye(g.size)
            state.scaled = False
            d = g.copy()
    else:
        d = g.copy()
    blocked = _blocked(theta, d, problem, cfg)
    if blocked.any():
        d = np.where(blocked, 0.0, d)
        if g @ d <= 0:
            d = np.where(blocked, 0.0, g)
    slope = float(g @ d)
    if slope <= 0:
        state.converged = True
        return theta, ev
    alpha = 1.0 if cfg.direction == "bfgs" and state.hinv is not None else state.last_step
    if cfg.use_curvature:
        dn = np.linalg.norm(d)
        kappa = problem.curvature(theta, d / dn)
        if kappa < 0:
            alpha = slope / (-kappa * dn**2)
    if problem.include_omega and d[problem.n_amp] != 0 and theta[problem.n_amp] > 0:
        # relative change of Omega per step is capped
        cap = cfg.max_omega_step * theta[problem.n_amp] / abs(d[problem.n_amp])
        alpha = min(alpha, cap)
    if cfg.max_amplitude_step is not None:
        da = float(np.abs(d[:problem.n_amp]).max(initial=0.0))
        if da > 0:
            alpha = min(alpha, cfg.max_amplitude_step / da)
    for _ in range(cfg.max_backtracks + 1):
        trial = _project(theta + alpha * d, problem, cfg)
        try:
            new = problem(trial)
        except DegenerateMode:
            new = None
        if new is not None and new.value >= ev.value + cfg.armijo * alpha * slope:
            break
        alpha *= cfg.shrink
    else:
        raise LineSearchFailed(f"no sufficient increase after {cfg.max_backtracks} backtracks")
    s = trial - theta
    if cfg.direction == "bfgs":
        g_new = new.grad if state.frozen is None else np.where(state.frozen, 0.0, new.grad)
        y = -(g_new - g)
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not state.scaled:
                state.hinv = np.eye(g.size) * sy / float(y @ y)
                state.scaled = True
            rho = 1.0 / sy
            v = np.eye(g.size) - rho * np.outer(s, y)
            state.hinv = v @ state.hinv @ v.T + rho * np.outer(s, s)
    state.last_step = min(2 * alpha, 1e6)
    if np.linalg.norm(s) < cfg.step_tol * max(1.0, np.linalg.norm(theta)):
        state.converged = True
    return trial, new


def schedule_penalty(p: float, f0: float, cfg: OptimizerConfig) -> float:
    """Zero until F0 first reaches F_thr, then p0, then grow while F0 >= F_thr.

    Below the threshold p is held, or multiplied by ``penalty_decay`` when set.
    """
    if cfg.f_thr is None:
        return p
    if f0 < cfg.f_thr:
        return p * cfg.penalty_decay if (p > 0 and cfg.penalty_decay is not None) else p
    return cfg.penalty0 if p == 0 else p * cfg.penalty_growth


def _row(it: int, ev: Evaluation, problem: Problem, theta: np.ndarray, penalty: float) -> TraceRow:
    m = problem.model_at(theta)
    return TraceRow(
        it,
        ev.value,
        ev.parts.get("F0", ev.value),
        ev.parts.get("Fp", 0.0),
        m.t_final,
        float(np.linalg.norm(ev.grad)) if ev.grad is not None else float("nan"),
        float(np.abs(m.amplitudes).max(initial=0.0)),
        penalty,
    )


def _evaluate_with_jitter(problem, theta, cfg, rng):
    for _ in range(cfg.max_jitters + 1):
        try:
            return theta, problem(theta)
        except DegenerateMode:
            theta = jitter(theta, problem.n_amp, cfg.jitter_scale, rng)
    raise DegenerateMode("degenerate quasi-energies persist after jittering")


def run(
    problem: Problem,
    config: OptimizerConfig,
    theta0: np.ndarray | None = None,
    *,
    callback: Callable[[int, np.ndarray, Evaluation], bool] | None = None,
    select: Callable[[TraceRow, np.ndarray], float] | None = None,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Iterate ``step`` up to ``max_iters``; return the best parameters seen.

    ``select`` scores visited iterates (default: F); ``callback`` may stop
    the loop early by returning True.  A gate objective with ``f_thr`` set
    gets its penalty scheduled every iteration.
    """
    rng = rng_for(config.seed, "jitter")
    theta = problem.theta() if theta0 is None else np.asarray(theta0, float).copy()
    theta, ev = _evaluate_with_jitter(problem, theta, config, rng)
    scheduled = isinstance(problem.objective, GateObjective) and config.f_thr is not None
    penalty = problem.objective.penalty if scheduled else 0.0
    trace = OptimizationTrace()
    row = _row(0, ev, problem, theta, penalty)
    trace.append(row)
    score = select or (lambda r, th: r.F)
    best, best_score = theta.copy(), score(row, theta)
    hold = scheduled and problem.include_omega and config.hold_omega and penalty == 0

    def fresh_state() -> StepState:
        st = StepState()
        if hold:
            st.frozen = np.zeros(theta.size, bool)
            st.frozen[problem.n_amp] = True
        return st

    state = fresh_state()
    failures = 0
    for it in range(1, config.max_iters + 1):
        try:
            theta, ev = step(theta, ev, problem, config, state)
            failures = 0
        except (LineSearchFailed, DegenerateMode) as exc:
            failures += 1
            log.debug("iteration %d: %s; jittering", it, exc)
            if failures > config.max_jitters:
                trace.message = f"stopped: {exc}"
                break
            theta, ev = _evaluate_with_jitter(
                problem, jitter(theta, problem.n_amp, config.jitter_scale, rng), config, rng
            )
            state = fresh_state()
        if scheduled:
            new_p = schedule_penalty(penalty, ev.parts["F0"], config)
            if new_p != penalty:
                penalty = problem.objective.penalty = new_p
                ev = problem(theta)
                if hold:
                    # Omega joins the search once the threshold is first met
                    hold = False
                    state = fresh_state()
        row = _row(it, ev, problem, theta, penalty)
        trace.append(row)
        sc = score(row, theta)
        if sc > best_score:
            best, best_score = theta.copy(), sc
        if callback is not None and callback(it, theta, ev):
            trace.message = trace.message or "stopped by callback"
            break
        if (
            config.stall_iters > 0 and not scheduled and it >= config.stall_iters
            and row.F - trace.rows[-1 - config.stall_iters].F < config.stall_tol
        ):
            trace.message = f"stalled: F gained < {config.stall_tol:g} over {config.stall_iters} iterations"
            break
        if state.converged and not scheduled:
            trace.converged = True
            trace.message = "converged"
            break
        if state.converged:
            state.converged = False
    else:
        trace.message = trace.message or "iteration budget exhausted"
    return best, trace


def initial_theta(problem: Problem, g_max: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Amplitudes ~ Uniform[-scale, scale] * g_max; Omega from the base model."""
    th = problem.theta()
    th[:problem.n_amp] = rng.uniform(-scale, scale, problem.n_amp) * g_max
    return th


def run_restarts(
    problem_factory: Callable[[], Problem],
    config: OptimizerConfig,
    g_max: float,
    *,
    score: Callable[[np.ndarray, OptimizationTrace, Problem], float] | None = None,
    select: Callable[[TraceRow, np.ndarray], float] | None = None,
    theta0: np.ndarray | None = None,
) -> tuple[np.ndarray, OptimizationTrace, int]:
    """Independent seeded runs; keep the best by ``score`` (default final-best F)."""

    def one(r: int):
        problem = problem_factory()
        rng = rng_for(config.seed, "init", r)
        th0 = theta0 if (theta0 is not None and r == 0) else initial_theta(problem, g_max, config.init_scale, rng)
        cfg = replace(config, seed=int(rng.integers(2**31)))
        best, trace = run(problem, cfg, th0, select=select)
        s = score(best, trace, problem) if score else problem(best, grad=False).value
        return s, best, trace

    workers = min(worker_count(), config.restarts)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(config.restarts)))
    else:
        results = [one(r) for r in range(config.restarts)]
    idx = int(np.argmax([r[0] for r in results]))
    return results[idx][1], results[idx][2], idx


@dataclass
class MinimalTimeResult:
    theta: np.ndarray
    omega: float
    t_f: float
    f0: float
    trace: OptimizationTrace
    feasible: bool


def feasible_time_score(f_thr: float) -> Callable[[TraceRow, np.ndarray], float]:
    """Shortest duration among iterates with F0 >= f_thr; infeasible rank by F0."""

    def score(row: TraceRow, theta: np.ndarray) -> float:
        if row.F0 >= f_thr:
            return -row.t_f
        return -1e6 - (f_thr - row.F0)

    return score


def minimal_time_search(problem: Problem, config: OptimizerConfig, theta0: np.ndarray | None = None) -> MinimalTimeResult:
    """Joint ascent over amplitudes and Omega with t_f = pi/Omega and a scheduled penalty."""
    if not isinstance(problem.objective, GateObjective) or not problem.include_omega:
        raise ValueError("minimal-time search needs a gate objective with Omega as a parameter")
    if config.f_thr is None:
        raise ValueError("minimal-time search needs a fidelity threshold")
    if config.omega_bounds is None:
        omega0 = problem.model.omega if theta0 is None else float(theta0[problem.n_amp])
        config = replace(config, omega_bounds=(omega0 / 4, omega0 * 8))
    problem.objective.penalty = 0.0
    best, trace = run(problem, config, theta0, select=feasible_time_score(config.f_thr))
    problem.objective.penalty = 0.0
    ev = problem(best, grad=False)
    omega = float(best[problem.n_amp])
    return MinimalTimeResult(best, omega, np.pi / omega, ev.parts["F0"], trace, ev.parts["F0"] >= config.f_thr)
