import json

import pytest

from drselect.cli import main


def test_example1(capsys):
    assert main(["example1"]) == 0
    out = capsys.readouterr().out
    assert "optimal value: 9.5000" in out
    assert "c1: s mod 2 = 0: policy value 9.5000" in out
    assert "c2: s mod 3 = 0: policy value 9.0725" in out
    assert "DRS (k=1) selects: c1: s mod 2 = 0" in out


def test_pipeline_to_stdout(capsys):
    assert main(["pipeline", "--seed", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("env,algorithm,seed")
    assert lines[1].startswith("loop4,drs,0,1,")


def test_pipeline_writes_files(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("environment: chain\nk: 2\nseeds: [0, 1]\nalgorithms: [drs, greedy]\n")
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 5
    body = json.loads((out / "records.json").read_text())
    assert len(body["records"]) == 4


def test_algorithm_override(tmp_path, capsys):
    assert main(["pipeline", "--algorithm", "variance", "--algorithm", "random"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["variance", "random"]


def test_select_json(tmp_path):
    assert main(["select", "--out", str(tmp_path)]) == 0
    (rec,) = json.loads((tmp_path / "selection.json").read_text())
    assert rec["seed"] == 0


def test_sweep(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("environment: chain\nseeds: [0]\nsweep:\n  k: [1, 2, 3]\n")
    assert main(["sweep", "--config", str(cfg), "--axis", "k", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "results.csv").read_text().splitlines()) == 4


def test_intervene(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("environment: chain\nk: 3\naccuracy: 0.8\n")
    out = tmp_path / "out"
    assert main(["intervene", "--config", str(cfg), "--alpha", "0", "--alpha", "1", "--out", str(out)]) == 0
    rows = (out / "results.csv").read_text().splitlines()[1:]
    assert [r.split(",")[8] for r in rows] == ["0.0", "1.0"]


def test_intervene_requires_noise(capsys):
    assert main(["intervene", "--alpha", "0.5"]) == 2
    assert "accuracy" in capsys.readouterr().err


def test_hardness_grid(tmp_path, capsys):
    assert main(["hardness", "--out", str(tmp_path)]) == 0
    assert "0 failed" in capsys.readouterr().out
    body = json.loads((tmp_path / "hardness.json").read_text())
    assert body["failed"] == 0 and body["instances"] == len(body["reports"])


def test_hardness_single_instance(tmp_path, capsys):
    cfg = tmp_path / "cov.yaml"
    cfg.write_text("weights: [1, 2]\nsets: [[0], [0, 1]]\nk: 1\n")
    assert main(["hardness", "--config", str(cfg)]) == 0
    assert "1 instances, 0 failed" in capsys.readouterr().out


@pytest.mark.parametrize(
    "text",
    ["environment: atari\n", "bogus_key: 1\n", "environment: [\n"],
)
def test_bad_config_exits_nonzero(tmp_path, capsys, text):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(text)
    assert main(["pipeline", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_file(tmp_path):
    assert main(["pipeline", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_bad_coverage_config(tmp_path):
    cfg = tmp_path / "cov.yaml"
    cfg.write_text("weights: [1]\n")
    assert main(["hardness", "--config", str(cfg)]) == 2
