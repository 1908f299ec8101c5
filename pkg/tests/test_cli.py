import json
import subprocess
import sys

import jsonschema
import pytest

from tqground.cli import main
from tqground.metrics import REPORT_SCHEMA

SMALL = "n_train = 24\nn_val = 12\nepochs = 1\nd = 8\nT = 8\nraw_dim = 8\nmin_span = 2\nmax_span = 4\n"


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.cfg").write_text(SMALL)
    return tmp_path


@pytest.mark.parametrize("setting", ["qa", "qa+self", "full", "full+self"])
def test_pipeline(workdir, setting, capsys):
    assert main(["synth", "--config", "c.cfg", "--out", "data"]) == 0
    assert main(["train", "--data", "data", "--setting", setting, "--config", "c.cfg", "--out", "m.json"]) == 0
    assert main(["eval", "--data", "data", "--ckpt", "m.json", "--setting", setting, "--config", "c.cfg",
                 "--report", "r.json"]) == 0
    report = json.loads((workdir / "r.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["n"] == 12
    capsys.readouterr()
    assert main(["ground", "--traces", "r.predictions.jsonl", "--alpha", "0.5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 12 and set(json.loads(lines[0])) == {"id", "span"}


def test_ground_flags(workdir):
    trace = {"id": "x", "scores": [0.1] * 2 + [0.8] * 8 + [0.1] * 2 + [0.95] + [0.1] * 3}
    (workdir / "t.jsonl").write_text(json.dumps(trace) + "\n")
    runs = {}
    for flags in ([], ["--no-refine"], ["--no-refine", "--scoring", "sum"]):
        assert main(["ground", "--traces", "t.jsonl", "--alpha", "0.5", "--out", "o.jsonl", *flags]) == 0
        runs[" ".join(flags)] = json.loads((workdir / "o.jsonl").read_text())["span"]
    assert runs == {"": [2, 9], "--no-refine": [12, 12], "--no-refine --scoring sum": [2, 9]}


def test_validation_errors_exit_one(workdir, capsys):
    (workdir / "bad.cfg").write_text("nope = 1\n")
    assert main(["synth", "--config", "bad.cfg", "--out", "d"]) == 1
    assert main(["train", "--data", "missing", "--out", "m.json"]) == 1
    (workdir / "t.jsonl").write_text('{"id": "a"}\n')
    assert main(["ground", "--traces", "t.jsonl"]) == 1
    err = capsys.readouterr().err
    assert "unknown config key" in err and "t.jsonl:1" in err


def test_runtime_errors_exit_two(workdir):
    assert main(["synth", "--config", "c.cfg", "--out", "data"]) == 0
    assert main(["train", "--data", "data", "--config", "c.cfg", "--out", "no/such/dir/m.json"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "tqground", "ground", "--traces", str(tmp_path / "none")],
                         capture_output=True, text=True)
    assert out.returncode == 1 and "cannot read traces" in out.stderr
