"""Command-line front end.

    floqctrl <experiment> --config <path> [--seed N] [--out <dir>] [--nu-max N|auto]

Experiments: gate-min-time, tangle-plateau, chain-entangle, validate.
Exit codes: 0 success, 1 validation failure, 2 config error, 3 convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import experiments as ex
from . import optimizer as op
from . import spinsys as ss
from . import validation

EXPERIMENTS = ("gate-min-time", "tangle-plateau", "chain-entangle", "validate")
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2, 3

log = logging.getLogger("floqctrl")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    nu_max: int | str = "auto"
    n_max: int = 6
    system: ss.TwoSpinParams | ss.ChainParams | None = None
    target: tuple[float, float, float] | None = None
    initial_state: ss.BlochProductState | None = None
    t_f: float | None = None
    penalty: float = 1e-4
    extra_times: tuple[float, ...] = ()
    errors: tuple[float, ...] = ()
    train_members: int = 10
    test_members: int = 100
    bound_target: float = 1 - 1e-5
    horizon: float | None = None
    samples: int = 1000
    optimizer: op.OptimizerConfig = field(default_factory=op.OptimizerConfig)
    suites: dict = field(default_factory=dict)


_REQUIRED = {
    "gate-min-time": ("system", "target", "t_f"),
    "tangle-plateau": ("system", "initial_state", "t_f"),
    "chain-entangle": ("system", "initial_state", "t_f"),
    "validate": (),
}


def _finite(x, name: str) -> float:
    x = float(x)
    if not np.isfinite(x):
        raise ConfigError(f"{name} must be finite")
    return x


def _system(raw: dict):
    if "omegas" in raw:
        return ss.ChainParams(
            tuple(_finite(v, "omegas") for v in raw["omegas"]),
            tuple(_finite(v, "gx") for v in raw["gx"]),
            tuple(_finite(v, "gy") for v in raw["gy"]),
        )
    return ss.TwoSpinParams(*(_finite(raw[k], k) for k in ("omega1", "omega2", "gx", "gy")))


def _optimizer(raw: dict | None) -> op.OptimizerConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(op.OptimizerConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    for key in ("omega_bounds",):
        if raw.get(key) is not None:
            raw[key] = tuple(float(v) for v in raw[key])
    return op.OptimizerConfig(**raw)


def parse_config(raw: Any) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from parsed YAML; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    kind = raw.get("experiment")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {kind!r}")
    missing = [k for k in _REQUIRED[kind] if raw.get(k) is None]
    if missing:
        raise ConfigError(f"{kind} config is missing {missing}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        kw = dict(raw)
        if kw.get("system") is not None:
            kw["system"] = _system(kw["system"])
        if kw.get("initial_state") is not None:
            kw["initial_state"] = ss.BlochProductState(
                tuple(map(float, kw["initial_state"]["thetas"])), tuple(map(float, kw["initial_state"]["phis"]))
            )
        if kw.get("target") is not None:
            kw["target"] = tuple(_finite(v, "target") for v in kw["target"])
            if len(kw["target"]) != 3:
                raise ConfigError("target needs three canonical angles")
        for key in ("extra_times", "errors"):
            kw[key] = tuple(_finite(v, key) for v in kw.get(key) or ())
        for key in ("t_f", "horizon"):
            if kw.get(key) is not None:
                kw[key] = _finite(kw[key], key)
                if kw[key] <= 0:
                    raise ConfigError(f"{key} must be positive")
        kw["optimizer"] = _optimizer(kw.get("optimizer"))
        kw["nu_max"] = _nu_max(kw.get("nu_max", "auto"))
        cfg = ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc
    if kind == "tangle-plateau" and not isinstance(cfg.system, ss.TwoSpinParams):
        raise ConfigError("tangle-plateau needs a two-spin system")
    if kind == "gate-min-time" and not isinstance(cfg.system, ss.TwoSpinParams):
        raise ConfigError("gate-min-time needs a two-spin system")
    if kind == "chain-entangle" and cfg.system.n_spins not in (3, 4):
        raise ConfigError("chain-entangle supports 3 or 4 spins")
    if cfg.initial_state is not None and cfg.system is not None:
        n = 2 if isinstance(cfg.system, ss.TwoSpinParams) else cfg.system.n_spins
        if cfg.initial_state.n_spins != n:
            raise ConfigError("initial state does not match the number of spins")
    return cfg


def _nu_max(value) -> int | str:
    if value in (None, "auto"):
        return "auto"
    n = int(value)
    if n < 1:
        raise ConfigError("nu_max must be a positive integer or 'auto'")
    return n


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(raw)


# ------------------------------------------------------------- writers


def _fmt(x: float) -> str:
    return "%.11e" % x


def write_series(path: Path, times: np.ndarray, columns: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_us", *columns])
        for i, t in enumerate(times):
            w.writerow(["%.6f" % t, *(_fmt(c[i]) for c in columns.values())])


TRACE_FIELDS = ("iter", "F", "F0", "Fp", "t_f", "grad_norm", "max_amp", "penalty")


def write_traces(path: Path, traces: dict[str, op.OptimizationTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", *TRACE_FIELDS])
        for stage, trace in traces.items():
            for r in trace.rows:
                w.writerow([stage, r.iter, *(_fmt(getattr(r, k)) for k in TRACE_FIELDS[1:])])


def write_pulses(path: Path, models: dict, samples: int) -> None:
    labels = ("x1", "y1", "xN", "yN")
    t_f = max(m.t_final for m in models.values())
    times = ex.sample_times(t_f, samples)
    cols = {}
    for name, model in models.items():
        f = model.pulses(times)
        for i in range(f.shape[0]):
            cols[f"{name}_f_{labels[i]}"] = f[i]
    write_series(path, times, cols)


def write_json(path: Path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------- experiments


def run_gate_min_time(cfg: ExperimentConfig, out: Path) -> int:
    res = ex.gate_min_time(
        cfg.system, cfg.target, n_max=cfg.n_max, t_f0=cfg.t_f, config=cfg.optimizer, nu_max=cfg.nu_max
    )
    horizon = cfg.horizon or 2 * res.t_f
    times = ex.sample_times(horizon, cfg.samples)
    ctrl = ex.gate_infidelity_series(res.model, res.target, times, res.nu_max)
    free = ex.gate_infidelity_series(res.drift_model, res.target, times, res.nu_max)
    write_series(out / "timeseries.csv", times, {"infidelity_controlled": ctrl, "infidelity_uncontrolled": free})
    write_traces(out / "trace.csv", {"min_time": res.trace})
    write_pulses(out / "pulse.csv", {"gate": res.model}, cfg.samples)
    free_at_tf = ex.gate_infidelity_series(res.drift_model, res.target, np.array([res.t_f]), res.nu_max)[0]
    write_json(out / "summary.json", {
        "experiment": cfg.experiment,
        "F0": res.f0,
        "t_f_us": res.t_f,
        "omega": res.model.omega,
        "max_amplitude": float(np.abs(res.model.amplitudes).max()),
        "feasible": bool(res.feasible),
        "f_thr": cfg.optimizer.f_thr,
        "restart": res.restart,
        "nu_max": res.nu_max,
        "t_char_us": float(np.pi / (4 * cfg.system.g_max)),
        "uncontrolled_F0_at_t_f": 1 - free_at_tf,
        "uncontrolled_best_F0_over_horizon": float(1 - free.min()),
        "amplitudes": res.model.amplitudes.tolist(),
    })
    return EXIT_OK if res.feasible else EXIT_CONVERGENCE


def run_tangle_plateau(cfg: ExperimentConfig, out: Path) -> int:
    res = ex.tangle_plateau(
        cfg.system, cfg.initial_state, t_f=cfg.t_f, n_max=cfg.n_max, penalty=cfg.penalty,
        extra_times=cfg.extra_times, config=cfg.optimizer, nu_max=cfg.nu_max,
    )
    horizon = cfg.horizon or 2 * cfg.t_f
    times = ex.sample_times(horizon, cfg.samples)
    cols = {"tangle_uncontrolled": ex.tangle_series(res.drift_model, res.psi0, times, res.nu_max)}
    for p in res.pulses:
        cols[f"tangle_{p.label}"] = ex.tangle_series(p.model, res.psi0, times, res.nu_max)
    write_series(out / "timeseries.csv", times, cols)
    write_traces(out / "trace.csv", {p.label: p.trace for p in res.pulses})
    write_pulses(out / "pulse.csv", {p.label: p.model for p in res.pulses}, cfg.samples)
    summary = {
        "experiment": cfg.experiment,
        "t_f_us": cfg.t_f,
        "penalty": cfg.penalty,
        "nu_max": res.nu_max,
        "uncontrolled_max_tangle": float(cols["tangle_uncontrolled"].max()),
        "pulses": {
            p.label: {
                "tangle_at_t_f": p.c2,
                "curvature_at_t_f": p.curvature,
                "plateau_start_us": p.plateau[0],
                "plateau_end_us": p.plateau[1],
                "plateau_width_us": p.width,
                "max_amplitude": p.max_amplitude,
            }
            for p in res.pulses
        },
    }
    write_json(out / "summary.json", summary)
    ok = all(p.c2 >= ex.PLATEAU_LEVEL for p in res.pulses)
    return EXIT_OK if ok else EXIT_CONVERGENCE


def run_chain_entangle(cfg: ExperimentConfig, out: Path) -> int:
    res = ex.chain_entangle(
        cfg.system, cfg.initial_state, t_f=cfg.t_f, n_max=cfg.n_max, config=cfg.optimizer, nu_max=cfg.nu_max,
        errors=cfg.errors, train_members=cfg.train_members, test_members=cfg.test_members,
        target=cfg.bound_target,
    )
    horizon = cfg.horizon or 2 * cfg.t_f
    times = ex.sample_times(horizon, cfg.samples)
    cols = {
        "eof_uncontrolled": ex.end_spin_eof(res.drift_model, res.psi0, times, res.nu_max),
        "eof_controlled": ex.end_spin_eof(res.model, res.psi0, times, res.nu_max),
    }
    for eps, model in res.robust_models.items():
        cols[f"eof_robust_{eps:g}"] = ex.end_spin_eof(model, res.psi0, times, res.nu_max)
    write_series(out / "timeseries.csv", times, cols)
    write_traces(out / "trace.csv", {"nominal": res.trace})
    models = {"nominal": res.model, **{f"robust_{e:g}": m for e, m in res.robust_models.items()}}
    write_pulses(out / "pulse.csv", models, cfg.samples)
    write_json(out / "summary.json", {
        "experiment": cfg.experiment,
        "n_spins": cfg.system.n_spins,
        "t_f_us": cfg.t_f,
        "nu_max": res.nu_max,
        "lower_bound": res.bound,
        "eof_at_t_f": res.eof_final,
        "uncontrolled_max_eof": float(cols["eof_uncontrolled"].max()),
        "max_amplitude": float(np.abs(res.model.amplitudes).max()),
        "robustness": [vars(r) for r in res.robustness],
    })
    return EXIT_OK if res.bound >= cfg.bound_target else EXIT_CONVERGENCE


def run_validate(cfg: ExperimentConfig, out: Path) -> int:
    nu = None if cfg.nu_max == "auto" else int(cfg.nu_max)
    results = validation.run_all(cfg.seed, nu, **cfg.suites)
    ok = all(r.passed for r in results)
    write_json(out / "validate_report.json", {
        "seed": cfg.seed,
        "nu_max": cfg.nu_max,
        "passed": ok,
        "suites": [r.as_dict() for r in results],
    })
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: defect {r.defect:.3e} (tol {r.tolerance:g})")
    return EXIT_OK if ok else EXIT_VALIDATION


RUNNERS = {
    "gate-min-time": run_gate_min_time,
    "tangle-plateau": run_tangle_plateau,
    "chain-entangle": run_chain_entangle,
    "validate": run_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="floqctrl", description="Floquet-based optimal control experiments")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=".")
    ap.add_argument("--nu-max", default=None, help="integer or 'auto'")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {args.experiment!r}")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.nu_max is not None:
            cfg.nu_max = _nu_max(args.nu_max)
        # one master seed drives every random stream
        cfg.optimizer = replace(cfg.optimizer, seed=cfg.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.experiment](cfg, out)


if __name__ == "__main__":
    sys.exit(main())
