from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from floqctrl import cli
from floqctrl import spinsys as ss

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TANGLE = {
    "experiment": "tangle-plateau",
    "n_max": 2,
    "system": {"omega1": 0.3, "omega2": 0.2, "gx": 2.7, "gy": 6.2},
    "initial_state": {"thetas": [1.59, 2.10], "phis": [5.23, 0.57]},
    "t_f": 0.4,
    "extra_times": [0.35],
    "samples": 40,
    "optimizer": {"max_iters": 3},
}
GATE = {
    "experiment": "gate-min-time",
    "n_max": 2,
    "system": {"omega1": 0.13, "omega2": 0.26, "gx": 5.40, "gy": 9.95},
    "target": [0.5, 0.4, 0.3],
    "t_f": 0.2,
    "samples": 30,
    "optimizer": {"max_iters": 2, "f_thr": -1.0},
}
CHAIN = {
    "experiment": "chain-entangle",
    "n_max": 2,
    "system": {"omegas": [0.91, 0.97, 0.40], "gx": [0.78, 1.48], "gy": [1.27, 2.65]},
    "initial_state": {"thetas": [1.39, 1.28, 0.71], "phis": [6.03, 0.95, 5.30]},
    "t_f": 1.0,
    "errors": [0.1],
    "train_members": 2,
    "test_members": 3,
    "samples": 30,
    "optimizer": {"max_iters": 2},
}


def write(tmp_path: Path, data, name="cfg.yaml") -> str:
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else yaml.safe_dump(data))
    return str(p)


def read_csv(path: Path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestParseConfig:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
    def test_shipped_configs_parse(self, name):
        cfg = cli.load_config(CONFIGS / name)
        assert cfg.experiment in cli.EXPERIMENTS

    def test_fig1_values(self):
        cfg = cli.load_config(CONFIGS / "fig1_gate.yaml")
        assert cfg.system == ss.TwoSpinParams(0.13, 0.26, 5.40, 9.95)
        assert cfg.target == (0.5, 0.4, 0.3)

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("t_f"),
        lambda d: d.update(t_f=-1.0),
        lambda d: d.update(experiment="nope"),
        lambda d: d.update(bogus=1),
        lambda d: d["optimizer"].update(bogus=1),
        lambda d: d["optimizer"].update(penalty_growth=0.5),
        lambda d: d.update(nu_max=0),
        lambda d: d["system"].pop("gx"),
        lambda d: d["system"].update(gx="nan"),
        lambda d: d["initial_state"].update(thetas=[0.1, 0.2, 0.3]),
    ])
    def test_invalid(self, mutate):
        d = yaml.safe_load(yaml.safe_dump(TANGLE))
        mutate(d)
        with pytest.raises(cli.ConfigError):
            cli.parse_config(d)

    def test_not_a_mapping(self):
        with pytest.raises(cli.ConfigError):
            cli.parse_config([1, 2])

    def test_chain_spin_count(self):
        d = yaml.safe_load(yaml.safe_dump(CHAIN))
        d["system"] = {"omegas": [0.1, 0.2], "gx": [1.0], "gy": [1.0]}
        d["initial_state"] = {"thetas": [0.1, 0.2], "phis": [0.1, 0.2]}
        with pytest.raises(cli.ConfigError):
            cli.parse_config(d)


class TestMainExitCodes:
    def test_missing_file(self, tmp_path):
        assert cli.main(["validate", "--config", str(tmp_path / "none.yaml")]) == cli.EXIT_CONFIG

    def test_bad_yaml(self, tmp_path):
        assert cli.main(["validate", "--config", write(tmp_path, "a: [1,\n")]) == cli.EXIT_CONFIG

    def test_experiment_mismatch(self, tmp_path):
        assert cli.main(["validate", "--config", write(tmp_path, TANGLE)]) == cli.EXIT_CONFIG

    def test_bad_nu_max_flag(self, tmp_path):
        code = cli.main(["tangle-plateau", "--config", write(tmp_path, TANGLE), "--nu-max", "0"])
        assert code == cli.EXIT_CONFIG

    def test_validate_quick(self, tmp_path, capsys):
        code = cli.main(["validate", "--config", str(CONFIGS / "validate_quick.yaml"), "--out", str(tmp_path)])
        assert code == cli.EXIT_OK
        report = json.loads((tmp_path / "validate_report.json").read_text())
        assert report["passed"] and len(report["suites"]) == 6
        assert capsys.readouterr().out.count("PASS") == 6

    def test_validate_underresolved(self, tmp_path, capsys):
        code = cli.main([
            "validate", "--config", str(CONFIGS / "validate_quick.yaml"), "--out", str(tmp_path), "--nu-max", "2",
        ])
        assert code == cli.EXIT_VALIDATION
        assert "FAIL" in capsys.readouterr().out

    def test_gate_infeasible_exit(self, tmp_path):
        d = yaml.safe_load(yaml.safe_dump(GATE))
        d["optimizer"]["f_thr"] = 0.999999
        code = cli.main(["gate-min-time", "--config", write(tmp_path, d), "--out", str(tmp_path)])
        assert code == cli.EXIT_CONVERGENCE
        assert not json.loads((tmp_path / "summary.json").read_text())["feasible"]


class TestOutputs:
    def test_tangle_schema_and_determinism(self, tmp_path):
        cfg = write(tmp_path, TANGLE)
        for run in ("a", "b"):
            cli.main(["tangle-plateau", "--config", cfg, "--out", str(tmp_path / run), "--seed", "4"])
        for name in ("timeseries.csv", "trace.csv", "pulse.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = read_csv(tmp_path / "a" / "timeseries.csv")
        assert rows[0] == ["time_us", "tangle_uncontrolled", "tangle_peak", "tangle_curvature", "tangle_multi_time"]
        assert len(rows) == 41
        assert rows[1][0] == "0.000000" and rows[-1][0] == "0.800000"
        assert "e" in rows[1][1]
        trace = read_csv(tmp_path / "a" / "trace.csv")
        assert trace[0] == ["stage", *cli.TRACE_FIELDS]
        assert {r[0] for r in trace[1:]} == {"peak", "curvature", "multi_time"}
        pulses = read_csv(tmp_path / "a" / "pulse.csv")
        assert pulses[0][1] == "peak_f_x1" and len(pulses[0]) == 13
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert set(summary["pulses"]) == {"peak", "curvature", "multi_time"}

    def test_seed_changes_result(self, tmp_path):
        cfg = write(tmp_path, TANGLE)
        cli.main(["tangle-plateau", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
        cli.main(["tangle-plateau", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
        assert (tmp_path / "a" / "pulse.csv").read_bytes() != (tmp_path / "b" / "pulse.csv").read_bytes()

    def test_gate_outputs(self, tmp_path):
        code = cli.main(["gate-min-time", "--config", write(tmp_path, GATE), "--out", str(tmp_path)])
        assert code == cli.EXIT_OK
        rows = read_csv(tmp_path / "timeseries.csv")
        assert rows[0] == ["time_us", "infidelity_controlled", "infidelity_uncontrolled"]
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["t_char_us"] == pytest.approx(np.pi / (4 * 9.95))
        assert s["t_f_us"] == pytest.approx(np.pi / s["omega"])

    def test_chain_outputs(self, tmp_path):
        cli.main(["chain-entangle", "--config", write(tmp_path, CHAIN), "--out", str(tmp_path)])
        rows = read_csv(tmp_path / "timeseries.csv")
        assert rows[0] == ["time_us", "eof_uncontrolled", "eof_controlled", "eof_robust_0.1"]
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["n_spins"] == 3 and len(s["robustness"]) == 1
        vals = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        assert np.all((vals >= -1e-12) & (vals <= 1 + 1e-12))
