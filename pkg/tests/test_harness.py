import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from bikecross import sim
from bikecross.cli import main
from bikecross.errors import ParseError, ValidationError
from bikecross.scenario import load_scenario, loads_scenario, with_value
from bikecross.sweep import parse_param, run_sweep

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

REFERENCE = """
[reference]
kind = "line"
speed = 1.0
"""


def doc(top="", tables=""):
    return "schema = 1\n" + top + REFERENCE + tables


MINIMAL = doc()
FLAT_SHORT = doc("duration = 1.0\n")


@pytest.fixture(scope="module")
def flat_log():
    return sim.run(load_scenario(SCENARIOS / "flat.toml"))


@pytest.fixture(scope="module")
def obstacle_log():
    return sim.run(load_scenario(SCENARIOS / "single_obstacle.toml"))


def test_minimal_file_gets_defaults():
    sc = loads_scenario(MINIMAL)
    assert sc.params.m_b == 24.0 and sc.params.J_t == pytest.approx(3.19)
    assert sc.impulse.kappa == 0.05 and sc.impulse.phi_max == pytest.approx(math.radians(30))
    assert sc.supervisor.a_x_max == 5.0 and sc.supervisor.varphi_b_max == pytest.approx(math.radians(5))
    assert sc.actuator.v_max == 1.5
    assert sc.obstacles == ()


def test_unknown_key_is_named():
    with pytest.raises(ParseError) as err:
        loads_scenario(MINIMAL + "[impulse]\nkhapa = 0.05\n")
    assert err.value.key == "khapa"
    assert "khapa" in str(err.value)


def test_schema_required():
    with pytest.raises(ParseError):
        loads_scenario('[reference]\nkind = "line"\n')


def test_overlapping_obstacles():
    text = MINIMAL + "[[obstacles]]\ns_o = 1.0\nh_o = 0.05\n[[obstacles]]\ns_o = 1.1\nh_o = 0.05\n"
    with pytest.raises(ValidationError):
        loads_scenario(text)


def test_unsorted_obstacles():
    text = MINIMAL + "[[obstacles]]\ns_o = 3.0\nh_o = 0.05\n[[obstacles]]\ns_o = 1.0\nh_o = 0.05\n"
    with pytest.raises(ValidationError):
        loads_scenario(text)


def test_bad_values():
    with pytest.raises(ValidationError):
        loads_scenario(doc("duration = -1.0\n"))
    with pytest.raises(ValidationError):
        loads_scenario(MINIMAL + "[[obstacles]]\ns_o = 1.0\nh_o = 0.3\n")
    with pytest.raises(ValidationError):
        loads_scenario(MINIMAL + "[impulse]\nkappa = -0.05\n")


def test_with_value_does_not_mutate():
    sc = load_scenario(SCENARIOS / "ladder.toml")
    raw = sc.source
    changed = with_value(raw, "obstacles.0.h_o", 0.031)
    assert changed["obstacles"][0]["h_o"] == 0.031
    assert raw["obstacles"][0]["h_o"] != 0.031


def test_flat_run(flat_log):
    m = sim.metrics(flat_log)
    assert m.verdict == "Balanced"
    assert m.tracking_rmse < 0.02
    assert m.impulses == 0
    assert m.settle_time_after_impulse is None
    assert m.crossings_attempted == 0 == m.crossings_succeeded
    assert np.all(np.diff(flat_log.t) > 0)


def test_obstacle_run_invariants(obstacle_log):
    log = obstacle_log
    m = sim.metrics(log)
    assert m.crossings_succeeded <= m.crossings_attempted
    assert np.all(np.diff(log.t) > 0)
    for e in log.events:
        assert log.t[0] <= e["t"] <= log.t[-1]
    modes = dict(zip(np.round(log.t, 6), log.modes))
    for e in log.events:
        if e["kind"] == "impulse":
            assert modes[round(e["t"], 6)] != "Tracking"
            assert (e["side"] == "Right") == (e["delta_tau_x"] < 0)
            assert math.copysign(1, e["delta_tau_x"]) == -math.copysign(1, e["dot_varphi_b_pre_deg_s"])
    assert "Failed" not in log.modes


def test_mode_toggles_compose():
    base = load_scenario(SCENARIOS / "single_obstacle.toml")
    for impulse, residual in [(True, False), (False, True), (False, False)]:
        sc = dataclasses.replace(base, duration=1.2, modes=dataclasses.replace(
            base.modes, impulse=impulse, residual=residual))
        log = sim.run(sc)
        assert log.verdict in ("Balanced", "BalanceLost")
        if not impulse:
            assert not [e for e in log.events if e["kind"] == "impulse"]


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_export_headers_and_determinism(tmp_path, obstacle_log):
    a = sim.export(obstacle_log, tmp_path / "a")
    again = sim.run(load_scenario(SCENARIOS / "single_obstacle.toml"))
    b = sim.export(again, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    state = read(tmp_path / "a" / "state.csv")
    assert state[0] == list(sim.STATE_COLUMNS)
    assert state[0] == ["t", "x", "y", "psi", "varphi_b", "phi", "v", "dot_varphi_b", "mode"]
    events = read(tmp_path / "a" / "events.csv")
    assert events[0] == list(sim.EVENT_COLUMNS)
    assert {r[1] for r in events[1:]} >= {"impact", "impulse"}
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["verdict"] == "Balanced" and metrics["impulses"] >= 1


def test_sweep_order_and_values():
    params = [parse_param("obstacles.0.h_o=0.02,0.04")]
    runs = run_sweep(load_scenario(SCENARIOS / "ladder.toml").source, params, "ladder")
    assert [r.values for r in runs] == [(0.02,), (0.04,)]
    assert [r.index for r in runs] == [0, 1]
    assert parse_param("x=0:1:3") == ("x", [0.0, 0.5, 1.0])
    with pytest.raises(ValidationError):
        parse_param("nothing")


def write(tmp_path, text, name="s.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_exit_codes(tmp_path):
    runner = CliRunner()
    ok = runner.invoke(main, ["run", write(tmp_path, FLAT_SHORT), "--out", str(tmp_path / "o")])
    assert ok.exit_code == 0, ok.output
    assert (tmp_path / "o" / "state.csv").exists()
    fall = doc("duration = 1.0\n", "[initial]\nvarphi_b_deg = 25.0\ndot_varphi_b_deg_s = 100.0\n")
    lost = runner.invoke(main, ["run", write(tmp_path, fall, "fall.toml"), "--no-impulse"])
    assert lost.exit_code == 2, lost.output
    bad = runner.invoke(main, ["run", write(tmp_path, doc("khapa = 1\n"), "bad.toml")])
    assert bad.exit_code == 1
    assert "khapa" in bad.output
    neg = runner.invoke(main, ["run", write(tmp_path, FLAT_SHORT), "--seed", "-1"])
    assert neg.exit_code == 1


def test_cli_sweep_and_roa(tmp_path):
    runner = CliRunner()
    scen = write(tmp_path, doc("duration = 1.0\n", "[roa]\nn_varphi_b = 5\nn_rate = 5\nduration = 1.0\n"))
    res = runner.invoke(main, ["sweep", scen, "--param", "initial.y=0.0,0.02", "--out", str(tmp_path / "s.csv")])
    assert res.exit_code == 0, res.output
    rows = read(tmp_path / "s.csv")
    assert rows[0][:2] == ["index", "initial.y"] and len(rows) == 3
    res = runner.invoke(main, ["roa", scen, "--out", str(tmp_path / "roa.csv")])
    assert res.exit_code == 0, res.output
    assert read(tmp_path / "roa.csv")[0] == ["varphi_b_deg", "dot_varphi_b_deg_s", "member"]


def test_cli_train_residual(tmp_path):
    cfg = write(tmp_path, "[dataset]\nsamples = 60\nseed = 2\n[train]\nepochs = 1\nhidden = 4\n", "t.toml")
    res = CliRunner().invoke(main, ["train-residual", cfg, "--out", str(tmp_path / "m.bkrs"),
                                    "--dataset", str(tmp_path / "d.csv")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "m.bkrs").read_bytes()[:4] == b"BKRS"
    assert read(tmp_path / "d.csv")[0][-1] == "h_o"
