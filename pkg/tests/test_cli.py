import csv
import subprocess
import sys

import numpy as np
import pytest

from pancdet.checkpoint import load_checkpoint
from pancdet.cli import main
from pancdet.model import init_params


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--train", "4", "--test", "3", "--seed", "5"]) == 0
    return out


@pytest.fixture
def cfg_file(tmp_path, tiny_cfg):
    path = tmp_path / "tiny.cfg"
    tiny_cfg.save(path)
    return path


def test_unknown_flag(capsys):
    assert main(["train", "--out", "m.ckpt", "--bogus"]) != 0
    assert "bogus" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert main(["fly"]) != 0
    assert "error" in capsys.readouterr().err


def test_entry_point_module_exit_code():
    proc = subprocess.run([sys.executable, "-m", "pancdet.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode != 0 and "required" in proc.stderr
    assert proc.stdout == ""


def test_missing_checkpoint(tmp_path, dataset, capsys):
    code = main(["eval", "--data", str(dataset), "--ckpt", str(tmp_path / "none.ckpt"), "--report", str(tmp_path / "r.csv")])
    assert code != 0
    assert "none.ckpt" in capsys.readouterr().err


def test_missing_data_dir(tmp_path, cfg_file, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--config", str(cfg_file), "--out", str(tmp_path / "m")]) != 0
    assert "nowhere" in capsys.readouterr().err


def test_missing_config(tmp_path, dataset, capsys):
    assert main(["train", "--data", str(dataset), "--config", str(tmp_path / "x.cfg"), "--out", str(tmp_path / "m")]) != 0
    assert "x.cfg" in capsys.readouterr().err


def test_gen_data_layout(dataset):
    assert (dataset / "dataset.json").is_file()
    assert len(list((dataset / "train" / "images").glob("*.png"))) == 4
    assert len((dataset / "test" / "annotations.jsonl").read_text().splitlines()) == 3


def test_train_zero_iterations_is_init(tmp_path, dataset, cfg_file, tiny_cfg):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(dataset), "--config", str(cfg_file), "--out", str(ckpt), "--iterations", "0"]) == 0
    model, manifest = load_checkpoint(ckpt)
    assert manifest["iteration"] == 0
    ref = init_params(tiny_cfg)
    for k, p in model.params.items():
        np.testing.assert_array_equal(p.data, ref[k].data)


def test_data_dir_from_environment(tmp_path, dataset, cfg_file, monkeypatch):
    monkeypatch.setenv("PANCDET_DATA_DIR", str(dataset))
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "m.ckpt"), "--iterations", "0"]) == 0


def test_eval_untrained_reports_finite_metrics(tmp_path, dataset, cfg_file, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(dataset), "--config", str(cfg_file), "--out", str(ckpt), "--iterations", "1"]) == 0
    paths = {k: tmp_path / f"{k}.csv" for k in ("report", "roc", "froc")}
    argv = ["eval", "--data", str(dataset), "--ckpt", str(ckpt), "--config", str(cfg_file)]
    argv += [x for k, p in paths.items() for x in (f"--{k}", str(p))]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "accuracy:" in out
    rows = dict(r for r in csv.reader(paths["report"].read_text().splitlines()[1:]))
    for key in ("tp", "fp", "tn", "fn", "froc_average"):
        assert np.isfinite(float(rows[key]))
    assert rows["accuracy"] == "undefined" or 0.0 <= float(rows["accuracy"]) <= 1.0
    assert len(paths["froc"].read_text().splitlines()) == 8


def test_eval_refuses_other_topology(tmp_path, dataset, cfg_file, tiny_cfg, capsys):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--data", str(dataset), "--config", str(cfg_file), "--out", str(ckpt), "--iterations", "0"])
    other = tmp_path / "other.cfg"
    tiny_cfg.replace(head_hidden=24).save(other)
    code = main(["eval", "--data", str(dataset), "--ckpt", str(ckpt), "--config", str(other), "--report", str(tmp_path / "r.csv")])
    assert code != 0
    assert tiny_cfg.topology_hash() in capsys.readouterr().err


def test_ablate_six_rows(tmp_path, dataset, cfg_file):
    out = tmp_path / "table.csv"
    assert main(["ablate", "--data", str(dataset), "--config", str(cfg_file), "--out", str(out), "--seeds", "0,1", "--iterations", "1"]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert len(rows) == 6
    marks = [(r["augmented_feature_pyramid"], r["self_adaptive_feature_fusion"], r["dc_module"]) for r in rows]
    assert marks == [("", "", ""), ("x", "", ""), ("", "x", ""), ("", "x", "x"), ("x", "x", ""), ("x", "x", "x")]
    assert {"accuracy", "accuracy_seed0", "accuracy_seed1"} <= set(rows[0])
