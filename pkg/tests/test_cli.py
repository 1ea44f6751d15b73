import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rotcloud.cli import main


@pytest.fixture(autouse=True)
def _cwd(tmp_path, monkeypatch):
    # commands without --out write config.resolved.json to the working directory
    monkeypatch.chdir(tmp_path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(d), "--categories", "3", "--train", "6", "--test", "3",
                 "--points", "128", "--seed", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def model(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.bin"
    assert main(["pretrain", "--data", str(data), "--k", "6", "--epochs", "2", "--num-points", "64",
                 "--out", str(out)]) == 0
    return out


def test_dirs(tmp_path, capsys):
    code, out, _ = run(capsys, "dirs", "--k", 32, "--out", tmp_path / "d.csv")
    assert code == 0 and "32" in out
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.DictReader(fh))
    v = np.array([[float(r[c]) for c in "xyz"] for r in rows])
    assert v.shape == (32, 3)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    assert (tmp_path / "config.resolved.json").exists()


def test_eval_rotation_format(model, data, capsys, tmp_path):
    code, out, _ = run(capsys, "eval-rotation", "--model", model, "--data", data)
    assert code == 0 and (tmp_path / "config.resolved.json").exists()
    key, value = out.strip().split("=")
    assert key == "accuracy" and 0.0 <= float(value) <= 1.0


class TestExitCodes:
    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "usage" in err

    def test_unknown_flag(self, capsys, tmp_path):
        code, _, err = run(capsys, "dirs", "--k", 6, "--out", tmp_path / "d.csv", "--bogus")
        assert code == 1 and "--bogus" in err

    def test_missing_required(self, capsys):
        code, _, err = run(capsys, "dirs", "--k", 6)
        assert code == 1 and "--out" in err

    def test_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "dirs", "--k", 1, "--out", tmp_path / "d.csv")
        assert code == 2 and err.startswith("rotcloud dirs: error:")

    def test_missing_data(self, capsys, tmp_path):
        code, _, err = run(capsys, "pretrain", "--data", tmp_path / "none", "--out", tmp_path / "m.bin")
        assert code == 2 and "no manifest" in err

    def test_bad_up_axis(self, capsys, data, tmp_path):
        code, _, err = run(capsys, "pretrain", "--data", data, "--up", "0,0,2", "--out", tmp_path / "m.bin")
        assert code == 2 and "unit 3-vector" in err
        code, _, err = run(capsys, "pretrain", "--data", data, "--up", "a,b", "--out", tmp_path / "m.bin")
        assert code == 1

    def test_bad_config(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text('{"kk": 6}')
        code, _, err = run(capsys, "dirs", "--config", tmp_path / "c.json", "--out", tmp_path / "d.csv")
        assert code == 1 and "unknown keys kk" in err

    def test_help(self, capsys):
        assert run(capsys, "--help")[0] == 0

    def test_console_entry(self):
        r = subprocess.run([sys.executable, "-m", "rotcloud.cli", "nope"], capture_output=True, text=True)
        assert r.returncode == 1 and "usage" in r.stderr


class TestConfig:
    def test_flag_overrides_file(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"k": 18, "out": str(tmp_path / "a.csv")}))
        assert run(capsys, "dirs", "--config", tmp_path / "c.json", "--k", 6)[0] == 0
        with open(tmp_path / "a.csv") as fh:
            assert len(fh.readlines()) == 7
        resolved = json.loads((tmp_path / "config.resolved.json").read_text())
        assert resolved["k"] == 6 and resolved["command"] == "dirs"

    def test_resolved_config_reproduces(self, data, tmp_path, capsys):
        first = tmp_path / "a"
        assert run(capsys, "pretrain", "--data", data, "--k", 6, "--epochs", 1, "--num-points", 64,
                   "--seed", 3, "--out", first / "m.bin")[0] == 0
        resolved = json.loads((first / "config.resolved.json").read_text())
        second = tmp_path / "b"
        resolved["out"] = str(second / "m.bin")
        (tmp_path / "again.json").write_text(json.dumps(resolved))
        assert run(capsys, "pretrain", "--config", tmp_path / "again.json")[0] == 0
        assert (first / "m.bin").read_bytes() == (second / "m.bin").read_bytes()
        assert (first / "m.log.csv").read_bytes() == (second / "m.log.csv").read_bytes()

    def test_seed_env_fallback(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("ROTCLOUD_SEED", "17")
        run(capsys, "dirs", "--k", 6, "--out", tmp_path / "d.csv")
        assert json.loads((tmp_path / "config.resolved.json").read_text())["seed"] == 17
        run(capsys, "dirs", "--k", 6, "--seed", 2, "--out", tmp_path / "d.csv")
        assert json.loads((tmp_path / "config.resolved.json").read_text())["seed"] == 2
        monkeypatch.setenv("ROTCLOUD_SEED", "x")
        assert run(capsys, "dirs", "--k", 6, "--out", tmp_path / "d.csv")[0] == 1

    def test_outdir(self, tmp_path, capsys):
        run(capsys, "dirs", "--k", 6, "--out", tmp_path / "d.csv", "--outdir", tmp_path / "cfg")
        assert (tmp_path / "cfg" / "config.resolved.json").exists()


def test_pipeline(data, model, tmp_path, capsys):
    tr, te = tmp_path / "tr.csv", tmp_path / "te.csv"
    assert run(capsys, "extract", "--model", model, "--data", data, "--out", tr)[0] == 0
    assert run(capsys, "extract", "--model", model, "--data", data, "--split", "test", "--out", te)[0] == 0
    code, out, _ = run(capsys, "svm", "--train", tr, "--test", te)
    assert code == 0
    assert 0.0 <= float(out.strip().split("=")[1]) <= 1.0

    both = tmp_path / "both.csv"
    assert run(capsys, "extract", "--model", model, "--model", "random", "--data", data, "--out", both)[0] == 0
    with open(both) as fh:
        assert len(next(csv.reader(fh))) == 1 + 512

    code, out, _ = run(capsys, "sweep", "--train", tr, "--test", te, "--fractions", "0.5,1.0",
                       "--out", tmp_path / "sw.csv")
    assert code == 0 and out.count("fraction=") == 2

    kp = tmp_path / "kp.bin"
    assert run(capsys, "keypoints", "--init", model, "--data", data, "--epochs", 1, "--num-points", 64,
               "--out", kp)[0] == 0
    assert run(capsys, "pck", "--model", kp, "--data", data, "--snap", "--out", tmp_path / "pck.csv")[0] == 0
    code, _, _ = run(capsys, "plot", tmp_path / "pck.csv", "--kind", "pck", "--out", tmp_path / "p.svg")
    assert code == 0 and (tmp_path / "p.svg").read_text().count("<polyline") == 1


def test_inputs_untouched(data, model, tmp_path, capsys):
    before = {p: p.read_bytes() for p in [model, *sorted(data.rglob("*.json"))]}
    run(capsys, "eval-rotation", "--model", model, "--data", data)
    run(capsys, "extract", "--model", model, "--data", data, "--out", tmp_path / "f.csv")
    assert {p: p.read_bytes() for p in before} == before


def test_mismatched_features(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("label,f0\n0,1.0\n1,2.0\n")
    (tmp_path / "b.csv").write_text("label,f0,f1\n0,1.0,1.0\n")
    code, _, err = run(capsys, "svm", "--train", tmp_path / "a.csv", "--test", tmp_path / "b.csv")
    assert code == 2 and "columns" in err
