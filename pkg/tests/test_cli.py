import csv

import numpy as np
import pytest

from pdl.cli import main
from pdl.data import load_dataset, save_dataset

CONFIG = """
# tiny end-to-end setup
train_per_category=4
val_per_category=1
test_per_category=1
n_surface=1024
enc_widths=8,16
reg_hidden=16
time_freqs=4
time_dim=8
pose_dim=8
trunk_hidden=16
epochs=1
batch_size=8
warmup_steps=2
val_steps=3
log_seconds=false
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(CONFIG)
    assert main(["gen-data", "--config", str(d / "run.cfg"), "--out", str(d / "data"), "--seed", "1"]) == 0
    assert main(["pretrain", "--config", str(d / "run.cfg"), "--data", str(d / "data"), "--out", str(d / "pre")]) == 0
    assert main(["train-joint", "--config", str(d / "run.cfg"), "--data", str(d / "data"),
                 "--checkpoint", str(d / "pre/model.ckpt"), "--out", str(d / "joint")]) == 0
    return d


def common(work, *extra):
    return ["--checkpoint", str(work / "joint/model.ckpt"), "--data", str(work / "data"), "--steps", "4", *extra]


def test_gen_data_outputs(work):
    assert {p.name for p in (work / "data").iterdir()} == {"data.cfg", "train.bin", "val.bin", "test.bin"}
    assert len(load_dataset(work / "data/train.bin")) == 16


def test_train_writes_logs(work):
    for run in ("pre", "joint"):
        assert (work / run / "train_log.csv").read_text().startswith("epoch,loss_reg,loss_dsm")
        assert (work / run / "model.ckpt").exists() and (work / run / "model.cfg").exists()
    assert main(["train-scratch", "--config", str(work / "run.cfg"), "--data", str(work / "data"),
                 "--out", str(work / "scratch")]) == 0


def test_eval_single_row(work, capsys):
    assert main(["eval", *common(work, "--guidance", "exponential", "--wmax", "4", "--k", "1")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["method", "map_5_2", "map_10_2", "map_10_5"]
    guided = lines[1].split()
    assert guided[0] == "single" and len(guided[2:]) == 3
    assert all(0.0 <= float(v) <= 100.0 for v in guided[2:])


def test_eval_with_mean_pool_csv(work):
    assert main(["eval", *common(work, "--k", "5", "--out", str(work / "ev"))]) == 0
    with open(work / "ev/eval.csv") as fh:
        body = list(csv.reader(fh))
    assert len(body) == 4 and body[3][0].startswith("mean-pool")


def test_compare_schedules_table(work, capsys):
    assert main(["compare-schedules", *common(work, "--sampler", "ddim", "--out", str(work / "cmp"))]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["none", "constant", "linear", "exponential"]
    assert all(len(ln.split()) == 4 for ln in lines)
    assert (work / "cmp/schedules.csv").read_text().count("\n") == 5


def test_sample_and_export(work):
    assert main(["sample", *common(work, "--k", "2", "--limit", "1", "--out", str(work / "smp"))]) == 0
    names = sorted(p.name for p in (work / "smp").iterdir())
    assert names == ["errors_0000.csv", "errors_0000.svg", "traj_0000_000.csv", "traj_0000_001.csv"]
    with open(work / "smp/traj_0000_000.csv") as fh:
        assert len(list(csv.reader(fh))) == 4 + 2
    assert main(["export-dist", *common(work, "--k", "3", "--out", str(work / "dist"))]) == 0
    assert len(list((work / "dist").glob("dist_*.csv"))) == 2


def test_usage_errors(work, capsys):
    assert main(["eval", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["eval", "--data", str(work / "data")]) == 1
    assert main(["sample", *common(work)]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_data_errors(work, tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"NOTDATA!" + bytes(20))
    assert main(["eval", "--checkpoint", str(work / "joint/model.ckpt"), "--data", str(tmp_path / "junk.bin")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(work / "data")]) == 2
    plain = load_dataset(work / "data/test.bin")
    save_dataset(tmp_path / "plain.bin", plain.subset(np.flatnonzero(~plain.symmetric)))
    assert main(["export-dist", "--checkpoint", str(work / "joint/model.ckpt"), "--data", str(tmp_path / "plain.bin"),
                 "--out", str(tmp_path / "o")]) == 2


def test_non_finite_training_exits_3(work, tmp_path):
    ds = load_dataset(work / "data/train.bin")
    ds.translations[:] = np.nan
    (tmp_path / "bad").mkdir()
    save_dataset(tmp_path / "bad/train.bin", ds)
    assert main(["pretrain", "--config", str(work / "run.cfg"), "--data", str(tmp_path / "bad"),
                 "--out", str(tmp_path / "o")]) == 3
