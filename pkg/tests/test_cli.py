import csv
import io
import json

import numpy as np
import pytest

from knotdoa import __version__, cli
from knotdoa.lasso_path import general_knots, orthogonal_knots
from knotdoa.signal_model import Scenario, synthesize


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def files(tmp_path, orth, over):
    (tmp_path / "orth.json").write_text(json.dumps({"mode": "orthogonal", "num_elements": 8, "num_grid": 8}))
    (tmp_path / "over.json").write_text(json.dumps({"mode": "oversampled", "num_elements": 8, "num_grid": 16}))
    snap = synthesize(orth, Scenario.equal_power((4,), 30.0), 0, noiseless=True)
    (tmp_path / "clean.json").write_text(json.dumps(snap.to_dict()))
    noisy = synthesize(over, Scenario.equal_power((5, 11), 20.0, phases=[0, 1]), 3)
    (tmp_path / "noisy.json").write_text(json.dumps(noisy.to_dict()))
    return tmp_path


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and out.strip() == f"knotdoa {__version__}"


def test_threshold_B(capsys):
    code, out, _ = run(capsys, "threshold", "--test", "B", "--pc", "0.99")
    assert code == 0 and out.strip() == "4.60517"


def test_threshold_A_uses_noise_count(capsys):
    _, a, _ = run(capsys, "threshold", "--test", "A", "--m", "8", "--s", "1")
    _, b, _ = run(capsys, "threshold", "--test", "A", "--m", "8", "--s", "6")
    assert float(a) > float(b)


def test_threshold_D_with_model(capsys, files):
    code, out, _ = run(capsys, "threshold", "--test", "D", "--s", "1", "--model", str(files / "over.json"),
                       "--active", "5")
    assert code == 0 and float(out) > 0


def test_detect_noiseless_single_source(capsys, files):
    code, out, _ = run(capsys, "detect", "--model", str(files / "orth.json"), "--snapshot",
                       str(files / "clean.json"), "--test", "B", "--sigma", "0.001")
    assert code == 0
    d = json.loads(out)
    assert d["s_hat"] == 1 and d["support"] == [4]


def test_detect_needs_sigma(capsys, files):
    code, _, err = run(capsys, "detect", "--model", str(files / "orth.json"), "--snapshot",
                       str(files / "clean.json"), "--test", "B")
    assert code == 1 and "sigma" in err


def test_detect_wrong_mode(capsys, files):
    code, _, _ = run(capsys, "detect", "--model", str(files / "over.json"), "--snapshot",
                     str(files / "noisy.json"), "--test", "B", "--sigma", "0.1")
    assert code == 1


def test_malformed_json_reports_line(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "mode": "orthogonal",\n  "num_elements": 8,,\n}')
    code, _, err = run(capsys, "path", "--model", str(bad), "--snapshot", str(bad))
    assert code == 1 and "bad.json:3:" in err


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "threshold", "--test", "B", "--bogus")
    assert code == 1 and "unrecognized" in err


def test_path_round_trip(capsys, files, over):
    code, out, _ = run(capsys, "path", "--model", str(files / "over.json"), "--snapshot", str(files / "noisy.json"))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    snap = json.loads((files / "noisy.json").read_text())
    b = np.array([complex(*p) for p in snap["b"]])
    lib = general_knots(over, b)
    assert len(rows) == len(lib.knots)
    for r, kn in zip(rows, lib.knots):
        assert r["tau"] == f"{kn.tau:.9g}"
        assert int(r["index"]) == kn.entering_index


def test_path_group(capsys, files):
    code, out, _ = run(capsys, "path", "--model", str(files / "orth.json"), "--snapshot",
                       str(files / "clean.json"), "--group", "--out", "-")
    assert code == 0 and out.splitlines()[1].split(",")[2] == "4"


def test_simulate_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "orthogonal", "tests": ["B"], "S_values": [2], "snr_grid_db": [20],
                               "trials": 100}))
    out = tmp_path / "r.csv"
    js = tmp_path / "r.json"
    code, _, _ = run(capsys, "simulate", "--config", str(cfg), "--trials", "500", "--seed", "3",
                     "--out", str(out), "--json", str(js))
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert rows[0]["trials"] == "500" and rows[0]["test"] == "B"
    assert json.loads(js.read_text())["config"]["base_seed"] == 3


def test_simulate_invalid_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 10}))
    code, _, _ = run(capsys, "simulate", "--config", str(cfg))
    assert code == 1


def test_numeric_failure_exit_code(capsys, files, monkeypatch):
    from knotdoa.stat_tests import NumericError

    def boom(*a, **k):
        raise NumericError("quadrature failed")

    monkeypatch.setattr(cli, "detect", boom)
    code, _, err = run(capsys, "detect", "--model", str(files / "orth.json"), "--snapshot",
                       str(files / "clean.json"), "--sigma", "0.1")
    assert code == 2 and "quadrature" in err


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "knotdoa", "threshold", "--test", "B"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "4.60517"
