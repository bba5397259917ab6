import json
import subprocess
import sys

import pytest

from dasgil.cli import run
from dasgil.config import toy_run_config
from dasgil.dataman import directory_digest
from dasgil.evalbench import read_report
from dasgil.retrieval import read_database


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "toygen" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dasgil.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "usage: dasgil" in out.stdout


def test_unknown_subcommand():
    assert run(["frobnicate"]) == 2


def test_domain_error_exits_one(tmp_path, capsys):
    code = run(["eval", "--data", str(tmp_path / "missing"), "--checkpoint", str(tmp_path / "x.dgck"),
                "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert "dasgil eval" in capsys.readouterr().err


def test_toygen_deterministic(tmp_path):
    cfg = toy_run_config(0)
    cfg.toy.sequences = 1
    (tmp_path / "toy.json").write_text(json.dumps(cfg.to_dict()))
    for d in ("a", "b"):
        assert run(["toygen", "--config", str(tmp_path / "toy.json"), "--out", str(tmp_path / d), "--seed", "7"]) == 0
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "toy_config.json").read_text())["seed"] == 7


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    toy = ["--preset", "toy", "--set", "toy.sequences=2"]
    assert run(["toygen", *toy, "--out", str(root / "data")]) == 0
    assert run(["train", *toy, "--data", str(root / "data"), "--out", str(root / "run"),
                "--set", "train.max_steps=3"]) == 0
    return root


def test_train_outputs(pipeline):
    rows = (pipeline / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(rows) == 3
    assert (pipeline / "run" / "checkpoint.dgck").stat().st_size > 0


def test_resume_continues_steps(pipeline, tmp_path):
    code = run(["train", "--preset", "toy", "--data", str(pipeline / "data"), "--out", str(tmp_path),
                "--checkpoint", str(pipeline / "run" / "checkpoint.dgck"), "--set", "train.max_steps=5"])
    assert code == 0
    steps = [json.loads(l)["step"] for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert steps == [4, 5]


def test_build_db_and_query(pipeline, capsys):
    db_path = pipeline / "clone.dgfd"
    assert run(["build-db", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "run" / "checkpoint.dgck"),
                "--db", str(db_path), "--environment", "clone", "--layers", "4,5"]) == 0
    db = read_database(db_path)
    assert db.layers == (4, 5) and all(i.endswith("_clone") for i in db.ids)
    capsys.readouterr()
    image = pipeline / "data" / "images" / f"{db.ids[3]}.png"
    assert run(["query", "--preset", "toy", "--checkpoint", str(pipeline / "run" / "checkpoint.dgck"),
                "--db", str(db_path), "--image", str(image), "--k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].split("\t")[1] == db.ids[3]


def test_eval_with_plots(pipeline):
    out = pipeline / "report.json"
    assert run(["eval", "--preset", "toy", "--data", str(pipeline / "data"),
                "--checkpoint", str(pipeline / "run" / "checkpoint.dgck"), "--out", str(out), "--plots"]) == 0
    rep = read_report(out)
    assert rep.meta["queries"] == 32
    assert len(list(pipeline.glob("report_*.png"))) == 2


def test_viz(pipeline):
    out = pipeline / "viz"
    assert run(["viz", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "run" / "checkpoint.dgck"),
                "--out", str(out), "--limit", "2"]) == 0
    assert len(list(out.glob("*.png"))) == 2


def test_bad_override_exits_one(pipeline):
    assert run(["toygen", "--preset", "toy", "--set", "toy.class_count=1", "--out", str(pipeline / "x")]) == 1
