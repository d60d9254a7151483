import json
import os

import pytest

from gigp.cli import main

TINY_CFG = """\
net.depth = 2
net.base_channels = 4
net.ssm_state_dim = 2
net.input_shape = 8,8,8
phantom.grid_size = 8
phantom.semi_axes_range = 1.5,2.0
phantom.center_jitter = 0.5
phantom.margin = 1
train.epochs = 1
train.augment_data = false
"""


@pytest.fixture()
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


def _gen(cfg_path, data_dir, count=26, force=False):
    argv = ["--config", cfg_path, "gen-data", "--out", data_dir,
            "--count", str(count)]
    if force:
        argv.append("--force")
    return main(argv)


def test_gen_data_writes_dataset(tmp_path, cfg_path, capsys):
    data = str(tmp_path / "data")
    assert _gen(cfg_path, data) == 0
    manifest = json.load(open(os.path.join(data, "manifest.json")))
    assert manifest["count"] == 26
    assert len(manifest["ids"]) == 26
    split = manifest["split"]
    assert len(split["labeled"]) == 4
    assert len(split["val"]) == 8 and len(split["test"]) == 12
    assert all(os.path.exists(os.path.join(data, f"{i}.vol"))
               for i in manifest["ids"])


def test_gen_data_refuses_overwrite(tmp_path, cfg_path, capsys):
    data = str(tmp_path / "data")
    assert _gen(cfg_path, data) == 0
    assert _gen(cfg_path, data) == 1
    assert "--force" in capsys.readouterr().err
    assert _gen(cfg_path, data, force=True) == 0


def test_train_eval_end_to_end(tmp_path, cfg_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    assert _gen(cfg_path, data) == 0
    assert main(["--config", cfg_path, "train", "--data", data,
                 "--run", run]) == 0
    for name in ("config.txt", "build.txt", "metrics.csv",
                 "teacher_final.ckpt", "teacher_best.ckpt"):
        assert os.path.exists(os.path.join(run, name)), name
    lines = open(os.path.join(run, "metrics.csv")).read().splitlines()
    assert lines[0].startswith("iter,epoch,L_total")
    assert lines[1].startswith("# ablation:")

    # a second train into the same run dir must refuse without --force
    assert main(["--config", cfg_path, "train", "--data", data,
                 "--run", run]) == 1
    capsys.readouterr()

    out_csv = str(tmp_path / "eval.csv")
    assert main(["--config", cfg_path, "eval",
                 "--checkpoint", os.path.join(run, "teacher_best.ckpt"),
                 "--data", data, "--split", "val", "--out", out_csv]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("id\tdice")
    rows = open(out_csv).read().splitlines()
    assert rows[0] == "id,dice,jaccard,hd95,asd"
    assert rows[-1].startswith("mean,")
    assert len(rows) == 1 + 8 + 1  # header + val volumes + mean


def test_eval_rejects_unknown_split(tmp_path, cfg_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    assert _gen(cfg_path, data) == 0
    assert main(["--config", cfg_path, "train", "--data", data,
                 "--run", run]) == 0
    capsys.readouterr()
    assert main(["--config", cfg_path, "eval",
                 "--checkpoint", os.path.join(run, "teacher_best.ckpt"),
                 "--data", data, "--split", "nope"]) == 1
    assert "unknown split" in capsys.readouterr().err


def test_eval_rejects_mismatched_network_config(tmp_path, cfg_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    assert _gen(cfg_path, data) == 0
    assert main(["--config", cfg_path, "train", "--data", data,
                 "--run", run]) == 0
    other = tmp_path / "other.cfg"
    other.write_text(TINY_CFG.replace("net.base_channels = 4",
                                      "net.base_channels = 6"))
    capsys.readouterr()
    assert main(["--config", str(other), "eval",
                 "--checkpoint", os.path.join(run, "teacher_best.ckpt"),
                 "--data", data]) == 1
    assert "does not match" in capsys.readouterr().err


def test_train_requires_dataset(tmp_path, cfg_path, capsys):
    assert main(["--config", cfg_path, "train",
                 "--data", str(tmp_path / "nowhere"),
                 "--run", str(tmp_path / "run")]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_bad_config_file_reports_all_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.lr = fast\nwho.knows = 1\n")
    assert main(["--config", str(bad), "gen-data",
                 "--out", str(tmp_path / "d")]) == 1
    err = capsys.readouterr().err
    assert "line 1" in err and "line 2" in err


def test_seed_override(tmp_path, cfg_path):
    data_a = str(tmp_path / "a")
    data_b = str(tmp_path / "b")
    assert main(["--config", cfg_path, "--seed", "3", "gen-data",
                 "--out", data_a, "--count", "26"]) == 0
    assert main(["--config", cfg_path, "--seed", "4", "gen-data",
                 "--out", data_b, "--count", "26"]) == 0
    va = open(os.path.join(data_a, "p000.vol"), "rb").read()
    vb = open(os.path.join(data_b, "p000.vol"), "rb").read()
    assert va != vb
