"""Scenario loading and the ``flexsim`` command line."""

import copy
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from flexsim.cli import main
from flexsim.errors import ScenarioError
from flexsim.scenario import build_scenario, load_scenario, load_shipped, shipped_path
from flexsim.waveform import Waveform


def _data(name):
    with open(shipped_path(name)) as fh:
        return json.load(fh)


def test_rc_scenario_shape():
    sc = load_shipped("rc")
    assert (sc.system.n1, sc.system.n_nl, sc.n_switches) == (1, 0, 0)
    assert len(sc.schedule.events) == 0


def test_buck_scenario_shape():
    sc = load_shipped("buck_pv")
    assert (sc.system.n1, sc.system.n_nl, sc.n_switches) == (2, 1, 2)
    assert len(sc.schedule.events) > 0


def test_duty_out_of_range_names_the_field():
    data = _data("buck_pv")
    data["pwm"]["legs"][0]["duty"]["value"] = 1.2
    with pytest.raises(ScenarioError) as info:
        build_scenario(data)
    assert info.value.path == "$.pwm.legs[0].duty.value"


def test_sine_duty_leaving_unit_interval_is_rejected():
    data = _data("buck_pv")
    data["pwm"]["legs"][0]["duty"] = {"kind": "sine", "offset": 0.8, "amplitude": 0.3,
                                      "frequency": 50.0}
    with pytest.raises(ScenarioError) as info:
        build_scenario(data)
    assert info.value.path == "$.pwm.legs[0].duty"


def test_unknown_switch_in_pwm_leg():
    data = _data("buck_pv")
    data["pwm"]["legs"][0]["upper"] = "S9"
    with pytest.raises(ScenarioError) as info:
        build_scenario(data)
    assert info.value.path == "$.pwm.legs[0].upper"


def test_dump_fills_defaults():
    dumped = load_shipped("rc").dump()
    assert dumped["solver"] == {"name": "taylor", "rel_tol": 1e-10, "abs_tol": 1e-12,
                                "q_min": 2, "q_max": 5, "safety": 0.8, "h_min": 1e-15,
                                "h_max": None, "feedback_check": True,
                                "metric_abs_tol": None}
    assert dumped["signals"] == ["C1"]
    # the dump is itself a valid scenario that dumps to the same document
    again = build_scenario(copy.deepcopy(dumped)).dump()
    assert again == dumped


def test_dump_adds_switch_resistances():
    dumped = load_shipped("buck_pv").dump()
    switches = [el for el in dumped["netlist"] if el["kind"] == "switch"]
    assert all("r_on" in el and "r_off" in el for el in switches)


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    t = np.sort(rng.random(50))
    wf = Waveform(t, {"a": rng.standard_normal(50), "b": rng.random(50) * 1e-300})
    path = tmp_path / "w.csv"
    wf.to_csv(path)
    back = Waveform.from_csv(path)
    assert back.names == wf.names
    assert np.array_equal(back.t, wf.t)
    for n in wf.names:
        assert np.array_equal(back[n], wf[n])


def test_cli_run_matches_closed_form(tmp_path):
    out = tmp_path / "rc.csv"
    assert main(["run", "rc", "--out", str(out)]) == 0
    wf = Waveform.from_csv(out)
    expect = 1.0 - np.exp(-wf.t / 1e-3)
    assert np.max(np.abs(wf["C1"] - expect)) < 1e-8
    stats = json.loads(out.with_suffix(".stats.json").read_text())
    assert stats["scenario"] == "rc" and stats["accepted_steps"] > 0


def test_cli_solvers_agree(tmp_path):
    a, b = tmp_path / "t.csv", tmp_path / "d.csv"
    assert main(["run", "rc", "--solver", "taylor", "--out", str(a)]) == 0
    assert main(["run", "rc", "--solver", "dp45", "--out", str(b)]) == 0
    wa, wb = Waveform.from_csv(a), Waveform.from_csv(b)
    assert np.array_equal(wa.t, wb.t)
    assert np.max(np.abs(wa["C1"] - wb["C1"])) <= 1e-7


def test_cli_tolerance_and_end_overrides(tmp_path):
    out = tmp_path / "rc.csv"
    assert main(["run", "rc", "--reltol", "1e-4", "--abstol", "1e-8", "--tend", "0.002",
                 "--out", str(out)]) == 0
    stats = json.loads(out.with_suffix(".stats.json").read_text())
    assert stats["rel_tol"] == 1e-4 and stats["abs_tol"] == 1e-8
    assert stats["t_span"] == [0.0, 0.002]
    assert Waveform.from_csv(out).t[-1] == pytest.approx(0.002)


def test_cli_missing_file_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", str(missing), "--out", str(tmp_path / "x.csv")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_cli_invalid_scenario_reports_field(tmp_path, capsys):
    data = _data("buck_pv")
    data["pwm"]["legs"][0]["duty"]["value"] = 1.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    assert main(["run", str(path), "--out", str(tmp_path / "x.csv")]) == 1
    assert "$.pwm.legs[0].duty.value" in capsys.readouterr().err


def test_load_scenario_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ScenarioError, match="invalid JSON"):
        load_scenario(path)


def test_cli_bench_writes_reports(tmp_path):
    stem = tmp_path / "bench"
    assert main(["bench", "rc", "--tolerances", "1e-4,1e-6", "--solvers", "taylor,dp45",
                 "--out", str(stem)]) == 0
    rows = json.loads(stem.with_suffix(".json").read_text())
    assert {(r["solver"], r["rel_tol"]) for r in rows} == {
        ("taylor", 1e-4), ("taylor", 1e-6), ("dp45", 1e-4), ("dp45", 1e-6)}
    assert all(math.isfinite(r["err_rel"]) for r in rows)
    assert len(stem.with_suffix(".csv").read_text().splitlines()) == 5


def test_cli_bench_unknown_solver(tmp_path, capsys):
    assert main(["bench", "rc", "--solvers", "ode45", "--out", str(tmp_path / "b")]) == 2
    assert "ode45" in capsys.readouterr().err


def _selftest(*extra):
    return subprocess.run([sys.executable, "-m", "flexsim.cli", "selftest", *extra],
                          capture_output=True, text=True, timeout=300)


def test_selftest_is_deterministic_and_passes():
    first, second = _selftest(), _selftest()
    assert first.returncode == 0 and second.returncode == 0
    assert first.stdout == second.stdout
    assert "8/8 checks passed" in first.stdout


def test_selftest_detects_injected_fault():
    res = _selftest("--inject-fault")
    assert res.returncode == 1
    assert "stencil moment conditions" in res.stdout and "FAIL" in res.stdout
