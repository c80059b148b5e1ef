import csv
import json

import numpy as np
import pytest

from thermodepth.cli import main
from thermodepth.datasets import read_json
from thermodepth.model import DepthRegressor, load_checkpoint
from thermodepth.pgm import read_pgm
from thermodepth.training import split_sizes


@pytest.fixture(scope="module")
def curves(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "curves"
    assert main(["simulate", "--pixels-per-depth", "5", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def prepared(curves, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep") / "img"
    assert main(["prepare", "--data", str(curves), "--input-size", "16", "--out", str(out)]) == 0
    return out


def test_simulate_layout(curves, capsys):
    files = sorted((curves / "curves").glob("*.csv"))
    assert len(files) == 45
    man = read_json(curves / "manifest.json")
    assert len(man["samples"]) == 45 and man["kind"] == "curves"
    run = read_json(curves / "run_manifest.json")
    assert run["seeds"] == {"master_seed": 3} and len(run["outputs"]) == 46


def test_simulate_missing_parent(tmp_path, capsys):
    bad = tmp_path / "nope" / "deeper"
    assert main(["simulate", "--pixels-per-depth", "1", "--out", str(bad)]) == 3
    assert str(tmp_path / "nope") in capsys.readouterr().err


def test_simulate_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"excitation": {"frame_rate": -1}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"bogus": {}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_prepare_images_and_rerun(curves, prepared, tmp_path):
    imgs = sorted((prepared / "images").glob("*.pgm"))
    assert len(imgs) == 45
    assert read_pgm(imgs[0]).shape == (16, 16)
    again = tmp_path / "again"
    assert main(["prepare", "--data", str(curves), "--input-size", "16", "--out", str(again)]) == 0
    for p in imgs:
        assert (again / "images" / p.name).read_bytes() == p.read_bytes()
    assert (again / "manifest.json").read_bytes() == (prepared / "manifest.json").read_bytes()


def test_prepare_default_size_and_no_enhance(curves, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["prepare", "--data", str(curves), "--input-size", "64", "--out", str(a)]) == 0
    assert main(["prepare", "--data", str(curves), "--input-size", "64", "--no-enhance", "--out", str(b)]) == 0
    name = sorted((a / "images").glob("*.pgm"))[0].name
    assert read_pgm(a / "images" / name).shape == (64, 64)
    assert read_json(b / "manifest.json")["pipeline"]["enhance"] is False
    assert (a / "images" / name).read_bytes() != (b / "images" / name).read_bytes()


def test_prepare_missing_data(tmp_path):
    assert main(["prepare", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_train_zero_epochs_then_eval(prepared, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(prepared), "--epochs", "0", "--seed", "1", "--out", str(run)]) == 0
    params, cfg, doc = load_checkpoint(run / "checkpoint.json")
    man = read_json(prepared / "manifest.json")
    labels = np.array([s["label_m"] for s in man["samples"]]) * 1e3
    split = doc["extra"]["split"]
    assert (len(split["train"]), len(split["val"]), len(split["test"])) == split_sizes(45)
    pos = {s["file"]: i for i, s in enumerate(man["samples"])}
    init = DepthRegressor(cfg).init_params(1, labels=labels[[pos[f] for f in split["train"]]])
    assert all(np.array_equal(params[k], init[k]) for k in init)
    assert (run / "loss_history.csv").read_text().splitlines() == ["epoch,train_loss,val_loss,lr"]

    rep = tmp_path / "rep"
    capsys.readouterr()
    assert main(["eval", "--data", str(prepared), "--checkpoint", str(run / "checkpoint.json"),
                 "--split", "all", "--out", str(rep)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 45 and summary["depths"] == 9
    rows = list(csv.reader(open(rep / "report_per_depth.csv")))
    assert len(rows) == 10
    assert main(["report", "--out", str(rep)]) == 0


def test_train_bad_lambda(prepared, tmp_path):
    assert main(["train", "--data", str(prepared), "--lam", "2", "--out", str(tmp_path / "r")]) == 2


def test_ablate_four_arms(curves, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(curves), "--input-size", "16", "--epochs", "1",
                 "--seed", "0", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0] == ["arm", "enhance", "rrh", "rmse", "mae_um", "mape_pct", "r2"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    for arm in "1234":
        assert (out / f"loss_history_arm{arm}.csv").exists()
