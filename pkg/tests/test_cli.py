import csv
import json

import pytest

from app.cli import main
from app.services.training_service import CHECKPOINT_NAME, HISTORY_NAME


def _rows(path):
    with open(path) as handle:
        return list(csv.reader(handle))


def test_solve_writes_solution(tmp_path, capsys):
    code = main(["solve", "--problem", "boundary1d", "--epsilon", "1e-3", "--mesh-n", "32", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "solution.csv")
    assert rows[0] == ["x", "u"]
    assert len(rows) == 202
    assert (tmp_path / "coefficients.txt").read_text().count("\n") == 32
    metadata = json.loads((tmp_path / "metadata.json").read_text())
    assert metadata["command"] == "solve"
    assert metadata["config"]["epsilon"] == 1e-3


def test_solve_with_explicit_forcing(tmp_path):
    code = main([
        "solve", "--problem", "interior1d", "--epsilon", "1e-3", "--mesh-n", "16",
        "--forcing", "1.81,0.09,1.68,-1.78", "--resolution", "11", "--out", str(tmp_path),
    ])
    assert code == 0
    rows = _rows(tmp_path / "solution.csv")
    assert len(rows) == 12


def test_missing_epsilon(tmp_path, capsys):
    assert main(["solve", "--problem", "boundary1d", "--out", str(tmp_path)]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_unknown_problem(tmp_path, capsys):
    assert main(["solve", "--problem", "cube3d", "--epsilon", "1e-3", "--out", str(tmp_path)]) == 2
    assert "config error at problem" in capsys.readouterr().err


def test_invalid_nested_config(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"problem": "paradigm", "epsilon": 1e-3, "train": {"learning_rate": -1}}))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "out")]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_bad_forcing(tmp_path):
    assert main(["solve", "--epsilon", "1e-3", "--forcing", "1,2,3", "--out", str(tmp_path)]) == 2


def test_sweep_rows(tmp_path):
    code = main([
        "sweep", "--problem", "boundary1d", "--mesh-n", "16", "--n-test", "1", "--n-ref", "256",
        "--grids", "uniform,layer", "--out", str(tmp_path),
    ])
    assert code == 0
    rows = _rows(tmp_path / "report.csv")
    assert len(rows) == 1 + 8
    assert sorted({float(r[1]) for r in rows[1:]}) == [1e-6, 1e-5, 1e-4, 1e-3]


def test_train_then_predict(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "problem": "paradigm",
        "epsilon": 1e-2,
        "mesh_n": 16,
        "resolution": 33,
        "samples": 8,
        "network": {"widths": [8]},
        "train": {"steps": 2, "max_iter": 5},
    }))
    train_dir = tmp_path / "train"
    assert main(["train", "--config", str(config), "--out", str(train_dir)]) == 0
    assert (train_dir / CHECKPOINT_NAME).exists()
    history = _rows(train_dir / HISTORY_NAME)
    assert history[0] == ["step", "loss", "seconds", "event"]
    assert all(row[2] == "0" for row in history[1:])

    predict_dir = tmp_path / "predict"
    code = main([
        "solve", "--config", str(config), "--checkpoint", str(train_dir / CHECKPOINT_NAME),
        "--out", str(predict_dir),
    ])
    assert code == 0
    # the input resolution also sets the output grid
    assert len(_rows(predict_dir / "solution.csv")) == 34

    eval_dir = tmp_path / "eval"
    code = main([
        "eval", "--config", str(config), "--checkpoint", str(train_dir / CHECKPOINT_NAME),
        "--n-test", "1", "--n-ref", "256", "--out", str(eval_dir),
    ])
    assert code == 0
    rows = _rows(eval_dir / "report.csv")
    assert {r[2] for r in rows[1:]} == {"trained"}


def test_reference_outputs(tmp_path):
    code = main(["reference", "--problem", "paradigm", "--epsilon", "1e-4", "--n-ref", "256", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "reference.npz").exists()
    assert len(_rows(tmp_path / "reference.csv")) == 258


@pytest.mark.slow
def test_mesh_study(tmp_path):
    code = main(["study", "--kind", "mesh", "--problem", "boundary1d", "--epsilon", "1e-6", "--n-test", "2",
                 "--out", str(tmp_path)])
    assert code == 0
    assert len(_rows(tmp_path / "h_study.csv")) == 4
