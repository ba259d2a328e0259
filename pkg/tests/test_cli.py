import json
import subprocess
import sys

import pytest

from proxsafe import cli, neural_sdf


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.dispatch(["sample", "--shape", "sphere", "--n", "1500", "--out", str(d / "d.bin")]) == 0
    rc = cli.dispatch(["train-sdf", "--data", str(d / "d.bin"), "--arch", "3,16,16,1", "--iters", "60",
                       "--batch-size", "128", "--out", str(d / "m.nsdf"), "--seed", "1"])
    assert rc == 0
    return d


def test_train_writes_model_and_metrics(trained):
    assert (trained / "m.nsdf").exists()
    metrics = json.loads((trained / "m.nsdf.metrics.json").read_text())
    assert metrics["iterations"] == 60
    _, meta = neural_sdf.load_model(trained / "m.nsdf")
    assert len(meta["bbox"]) == 2


def test_eval_prints_and_persists_bounds(trained, capsys):
    rc = cli.dispatch(["eval-sdf", "--model", str(trained / "m.nsdf"), "--shape", "sphere",
                       "--n-eval", "2000", "--n-surface", "500"])
    assert rc == 0
    doc = _last_json(capsys.readouterr().out)
    assert set(doc) == {"epsilon", "epsilon_plus", "e_h", "e_grad_h", "n_points"}
    _, meta = neural_sdf.load_model(trained / "m.nsdf")
    assert meta["bounds"]["e_h"] == doc["e_h"]
    saved = json.loads((trained / "m.nsdf.eval.json").read_text())
    assert saved["e_grad_h"] == doc["e_grad_h"]


def test_export_mesh(trained, tmp_path):
    out = tmp_path / "s.obj"
    rc = cli.dispatch(["export-mesh", "--model", str(trained / "m.nsdf"), "--res", "24", "--out", str(out),
                       "--bbox=-2,-2,-2,2,2,2"])
    assert rc == 0
    assert out.read_text().startswith("v ")


def test_simulate_precedence_and_outputs(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[simulate]\nhorizon = 3.0\nformat = "json"\n')
    rc = cli.dispatch(["--config", str(cfg), "simulate", "--scenario", "case1_ci", "--out", str(tmp_path),
                       "--horizon", "4.0"])
    assert rc == 0
    text = capsys.readouterr().out
    resolved = json.loads(text[: text.rindex("\n{")])
    assert resolved["settings"]["horizon"] == {"value": 4.0, "source": "cli"}
    assert resolved["settings"]["format"] == {"value": "json", "source": "config"}
    assert resolved["settings"]["include_timing"]["source"] == "default"
    doc = json.loads((tmp_path / "case1_ci.json").read_text())
    assert len(doc["records"]) == 5


def test_global_flags_after_subcommand(tmp_path):
    rc = cli.dispatch(["simulate", "--scenario", "case1_ci", "--horizon", "1", "--out", str(tmp_path),
                       "--log-level", "ERROR", "--seed", "3"])
    assert rc == 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "no_such_case"],
    ["simulate", "--horizon", "abc"],
    ["frobnicate"],
    ["sample", "--shape", "sphere", "--mesh", "x.obj"],
])
def test_config_errors_exit_1(argv):
    assert cli.dispatch(argv) == 1


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[simulate]\nhorizn = 3.0\n")
    assert cli.dispatch(["--config", str(cfg), "simulate", "--scenario", "case1_ci"]) == 1


def test_runtime_failure_exits_2(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"SDFD" + b"\x01\x00\x00\x00" + b"\x05" + b"\x00" * 7)
    assert cli.dispatch(["train-sdf", "--data", str(bad), "--iters", "1"]) == 2


def test_unsafe_run_exits_3(tmp_path):
    scen = tmp_path / "crash.toml"
    scen.write_text('name = "crash"\nhorizon = 200.0\nr0 = [0.0, 0.0, 2.05]\nv0 = [0.0, 0.0, -0.1]\n'
                    'r_d = [0.0, 0.0, -10.0]\n'
                    '[guidance]\nk_p = 0.5\nwith_ci = false\n[control]\nforce_update = "physics"\n')
    assert cli.dispatch(["simulate", "--scenario", str(scen), "--out", str(tmp_path)]) == 3


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "proxsafe.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "proxsafe" in out.stdout
