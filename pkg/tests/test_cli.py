import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from fdia.cli import build_parser, main
from fdia.grid import builtin_case
from fdia.measurement import PmuSeries


def run(tmp_path, *argv):
    return main(["--out-dir", str(tmp_path), *argv])


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "fdia", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "identify", "attack", "montecarlo", "report"):
        assert cmd in out.stdout


def _subparsers(parser):
    for action in parser._actions:
        if action.choices and isinstance(action.choices, dict):
            return action.choices
    return {}


UNIT_HINT = re.compile(r"\[(s|Hz|pu|rad|deg)\]|\((count|integer|pu)|JSON|CSV|path|id|name|"
                       r"dimensionless|director|fraction|model|scheme|ground truth|backend|threshold|instead|skip", re.I)


@pytest.mark.parametrize("name", ["simulate", "identify", "attack", "montecarlo", "report"])
def test_every_flag_documents_units(name):
    sub = _subparsers(build_parser())[name]
    for action in sub._actions:
        if action.dest == "help":
            continue
        assert action.help, f"{name} {action.option_strings} lacks help"
        assert UNIT_HINT.search(action.help), f"{name} {action.option_strings}: {action.help!r}"


def test_simulate_row_count(tmp_path):
    out = tmp_path / "traj.csv"
    assert run(tmp_path, "simulate", "--case", "ieee39", "--duration", "2", "--dt", "1/600",
               "--seed", "42", "--out", str(out)) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["t", "bus_id", "v", "delta"]
    per_bus = sum(1 for r in rows[1:] if r[1] == "28")
    assert per_bus == 2 * 600


def test_simulate_is_seed_determined(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(tmp_path, "simulate", "--duration", "1", "--seed", "5", "--out", str(p)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_errors(tmp_path, capsys):
    assert run(tmp_path, "simulate", "--case", str(tmp_path / "nope.json"), "--duration", "1") == 2
    assert "case file not found" in capsys.readouterr().err
    assert run(tmp_path, "simulate", "--duration", "0") == 2
    assert "duration" in capsys.readouterr().err


def test_identify_true_params(tmp_path):
    assert run(tmp_path, "identify", "--use-true-params", "--target", "28") == 0
    doc = json.loads((tmp_path / "params.json").read_text())
    net = builtin_case("ieee39")
    line = net.lines[net.line_index[(26, 28)]]
    assert doc["g_hat"]["26-28"] == line.g and doc["b_hat"]["26-28"] == line.b
    assert doc["tau_p_hat"]["28"] == net.bus(28).tau_p


def test_identify_from_trajectory(tmp_path):
    traj = tmp_path / "traj.csv"
    assert run(tmp_path, "simulate", "--duration", "60", "--seed", "1", "--out", str(traj)) == 0
    rc = run(tmp_path, "identify", "--traj", str(traj), "--target", "28", "--lag-seconds", "0.05",
             "--pmu-noise", "none", "--seed", "3")
    assert rc == 0
    doc = json.loads((tmp_path / "params.json").read_text())
    assert set(doc["g_hat"]) == {"26-28", "28-29"}


def test_identify_constant_pmu(tmp_path, capsys):
    n = 200
    ones = np.ones((n, 3))
    series = PmuSeries(60.0, (26, 28, 29), ones, 0.1 * ones, 0.5 * ones, 0.2 * ones)
    pmu = tmp_path / "pmu.csv"
    series.to_csv(pmu)
    assert run(tmp_path, "identify", "--pmu", str(pmu), "--target", "28", "--lag-seconds", "0.1") == 3
    assert "degenerate covariance" in capsys.readouterr().err


def test_identify_needs_input(tmp_path):
    assert run(tmp_path, "identify", "--target", "28") == 2


def test_attack_zero_and_region_two(tmp_path):
    out = tmp_path / "zero.json"
    assert run(tmp_path, "attack", "--use-true-params", "--target", "28", "--factor", "1.0",
               "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    assert all(e["delta"] == 0.0 for e in doc["rtu_deltas"])
    out = tmp_path / "r2.json"
    assert run(tmp_path, "attack", "--use-true-params", "--target", "18", "--magnitude", "0.8",
               "--angle-deg", "0", "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    v17, d17 = doc["malicious_deg"]["17"]
    assert abs(v17 - 0.893) <= 0.01 and abs(d17 - 2.48) <= 0.1
    assert doc["region"]["omega_a"] == [3, 16, 17, 18, 27]


def test_attack_infeasible_exit_four(tmp_path, capsys):
    rc = run(tmp_path, "attack", "--use-true-params", "--target", "18", "--magnitude", "0.9",
             "--angle-deg", "170")
    assert rc == 4
    assert "Newton" in capsys.readouterr().err


def test_attack_uses_params_file(tmp_path):
    assert run(tmp_path, "identify", "--use-true-params", "--target", "28") == 0
    assert run(tmp_path, "attack", "--params", str(tmp_path / "params.json"), "--target", "28") == 0
    assert run(tmp_path, "attack", "--params", str(tmp_path / "missing.json"), "--target", "28") == 2


def test_montecarlo_outputs(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sim": {"duration": 20.0}, "pmu": {"N": 1200},
                               "bdd": {"base_trials": 20, "base_spacing": 0.5}}))
    rc = run(tmp_path, "montecarlo", "--config", str(cfg), "--trials", "2", "--use-true-params",
             "--sweep", "attack.factor=0.8,0.6")
    assert rc == 0
    with open(tmp_path / "sweep_attack_factor.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["attack.factor", "p_bypass", "ci_lo", "ci_hi", "gamma", "n_trials", "n_failed"]
    assert [r[0] for r in rows[1:]] == ["0.8", "0.6"]
    results = sorted(tmp_path.glob("results_*.json"))
    assert len(results) == 2
    hist = sorted(tmp_path.glob("results_*_hist.csv"))
    assert hist
    assert run(tmp_path, "report", *map(str, results)) == 0


def test_montecarlo_zero_trials(tmp_path, capsys):
    assert run(tmp_path, "montecarlo", "--trials", "0") == 2
    assert "trials" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert run(tmp_path, "montecarlo", "--config", str(tmp_path / "none.json")) == 2
    assert "config file not found" in capsys.readouterr().err
