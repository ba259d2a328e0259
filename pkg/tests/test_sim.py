import json
import logging

import numpy as np
import pytest

from proxsafe import sim


@pytest.fixture(scope="module")
def short_run():
    cfg = sim.builtin_scenario("case1_ci").replace(horizon=30.0)
    return cfg, sim.run_episode(cfg)


@pytest.mark.parametrize("name", sim.list_builtin_scenarios())
def test_builtin_scenarios_round_trip(name):
    cfg = sim.builtin_scenario(name)
    again = sim.scenario_from_dict(sim.scenario_to_dict(cfg))
    assert sim.scenario_to_dict(again) == sim.scenario_to_dict(cfg)


def test_unknown_keys_rejected():
    data = sim.scenario_to_dict(sim.builtin_scenario("case1_ci"))
    data["guidance"]["kp"] = 3.0
    with pytest.raises(sim.ScenarioError, match="kp"):
        sim.scenario_from_dict(data)


def test_start_inside_body_is_rejected():
    cfg = sim.builtin_scenario("case1_ci").replace(r0=(0.0, 0.0, 1.0))
    with pytest.raises(sim.InitialSafetyError):
        sim.run_episode(cfg)


def test_log_shape_and_columns(short_run):
    cfg, run = short_run
    assert len(sim.LOG_COLUMNS) == 32
    assert run.rows.shape == (cfg.n_steps + 1, 32)
    np.testing.assert_allclose(run.t, np.arange(cfg.n_steps + 1) * cfg.control_period)
    assert np.all(np.abs(run.vector("F")) <= cfg.control.F_max)
    assert np.all(np.abs(run.vector("v_s")) <= cfg.guidance.v_max + 1e-12)


def test_episode_is_deterministic(short_run):
    cfg, run = short_run
    again = sim.run_episode(cfg)
    assert sim.runlog_csv(run) == sim.runlog_csv(again)


def test_csv_round_trips_exact_doubles(short_run, tmp_path):
    _, run = short_run
    path = tmp_path / "log.csv"
    sim.export_log(run, "csv", path)
    header, rows = sim.read_runlog_csv(path)
    assert header == list(sim.LOG_COLUMNS)
    col = header.index("h_true")
    assert [float(r[col]) for r in rows] == run.column("h_true").tolist()
    assert path.read_text().startswith("# ")


def test_json_export_carries_config(short_run, tmp_path):
    cfg, run = short_run
    path = tmp_path / "log.json"
    sim.export_log(run, "json", path)
    doc = json.loads(path.read_text())
    assert doc["config"]["name"] == cfg.name
    assert len(doc["records"]) == len(run.rows)
    assert "compute_time" not in doc["records"][0]


def test_timing_only_when_requested(short_run, tmp_path):
    _, run = short_run
    assert sim.TIMING_COLUMN not in sim.runlog_csv(run)
    assert sim.TIMING_COLUMN in sim.runlog_csv(run, include_timing=True)


def test_hold_mode_with_fast_velocity_loop_warns(caplog):
    cfg = sim.builtin_scenario("case1_ci").replace(horizon=2.0, force_update="hold")
    with caplog.at_level(logging.WARNING, logger="proxsafe.sim"):
        sim.run_episode(cfg)
    assert any("unstable in sampled form" in r.message for r in caplog.records)


def test_force_update_mode_validated():
    with pytest.raises(sim.ScenarioError):
        sim.builtin_scenario("case1_ci").replace(force_update="sometimes")


def test_monte_carlo_independent_of_worker_count(tmp_path):
    cfg = sim.builtin_scenario("case3_montecarlo").replace(horizon=5.0)
    one = sim.monte_carlo(cfg, n_runs=3, workers=1)
    two = sim.monte_carlo(cfg, n_runs=3, workers=2)
    assert one.to_csv() == two.to_csv()
    assert [r.r0 for r in one.runs] == [r.r0 for r in two.runs]
    for r in one.runs:
        assert sim.ANALYTIC_SHAPES["sphere_with_panels"]().signed_distance(np.array([r.r0]))[0] >= 0.5


def test_classify_labels():
    cfg = sim.builtin_scenario("case1_ci").replace(horizon=2.0)
    run = sim.run_episode(cfg)
    assert sim.classify(run, 100.0) == "converged"
    assert sim.classify(run, 0.1) == "stalled"
    run.rows[0, sim.LOG_COLUMNS.index("h_true")] = -0.01
    assert sim.classify(run, 100.0) == "unsafe"
