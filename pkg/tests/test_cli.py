"""CLI verbs exercised in-process with micro configurations."""

import json

import numpy as np
import pytest

from scdd.cli import main
from scdd.netcore import NetworkSpec, save_checkpoint
from scdd.pipeline import ExperimentConfig, RelabelConfig
from scdd.posttrain import PostTrainConfig
from scdd.recover import RecoveryConfig
from scdd.squeeze import PretrainConfig, ProbeConfig


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = NetworkSpec("tiny_resnet", depth=8, num_classes=3, input_shape=(3, 16, 16))
    config = ExperimentConfig(
        dataset_id="synth3",
        dataset_options={"train_per_class": 12, "val_per_class": 6, "image_hw": 16},
        spec=spec,
        pretrain=PretrainConfig("supervised", epochs=2, batch_size=32),
        probe=ProbeConfig(epochs=4),
        recovery=RecoveryConfig(ipc=2, iterations=4, batch_size=4, lr=0.2),
        relabel=RelabelConfig(n_crops=2),
        posttrain=PostTrainConfig(student_spec=spec, epochs=2, batch_size=16),
        output_root=str(root / "runs"),
    )
    path = root / "config.yaml"
    config.to_yaml(path)
    return path, config


def test_version_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0


def test_run_and_stage_verbs(config_path, capsys):
    path, config = config_path
    assert main(["run", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "top1" in out
    # stage verb on a finished run only skips
    assert main(["squeeze", "--config", str(path)]) == 0


def test_recover_relabel_posttrain_roundtrip(config_path, tmp_path, capsys):
    path, config = config_path
    from scdd.pipeline import run_dir_for

    teacher = run_dir_for(config) / "teacher.ckpt"
    out = tmp_path / "rec"
    assert main(["recover", "--teacher", str(teacher), "--out", str(out),
                 "--ipc", "2", "--iters", "3", "--lr", "0.2",
                 "--batch-size", "4"]) == 0
    assert (out / "trajectory.csv").exists()
    assert (out / "synthetic.pt").exists()
    assert len(list((out / "images").glob("class_*/img_*.png"))) == 6

    dd_dir = tmp_path / "dd"
    assert main(["relabel", "--teacher", str(teacher), "--synthetic",
                 str(out / "synthetic.pt"), "--out", str(dd_dir), "--crops", "2"]) == 0
    assert (dd_dir / "manifest.json").exists()

    report = tmp_path / "report.json"
    assert main(["posttrain", "--data", str(dd_dir), "--arch", "tiny_resnet",
                 "--epochs", "2", "--dataset", "synth3", "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert 0.0 <= payload["top1"] <= 1.0


def test_bnstats_comparison(config_path, tmp_path, capsys):
    path, config = config_path
    from scdd.pipeline import run_dir_for

    a = run_dir_for(config) / "pretrain.ckpt"
    b = run_dir_for(config) / "teacher.ckpt"
    out = tmp_path / "bn.json"
    assert main(["bnstats", "--ckpt", str(a), "--ckpt", str(b), "--out", str(out),
                 "--plot", str(tmp_path / "plots")]) == 0
    payload = json.loads(out.read_text())
    assert "comparison" in payload
    assert list((tmp_path / "plots").glob("*/bn_layer_*.png"))


def test_analyze_cluster(config_path, tmp_path):
    path, config = config_path
    from scdd.pipeline import run_dir_for

    dd = run_dir_for(config) / "distilled"
    out = tmp_path / "cluster.json"
    assert main(["analyze", "cluster", "--data", str(dd), "--out", str(out),
                 "--plots", str(tmp_path / "cplots")]) == 0
    payload = json.loads(out.read_text())
    assert "purity" in payload
    assert (tmp_path / "cplots" / "clusters_3d.png").exists()


def test_dataset_materialization(tmp_path):
    out = tmp_path / "corpus"
    assert main(["dataset", "--id", "synth3", "--out", str(out),
                 "--train-per-class", "3", "--val-per-class", "2",
                 "--image-hw", "8"]) == 0
    assert len(list((out / "train").glob("class_*/*.png"))) == 9
    assert len(list((out / "val").glob("class_*/*.png"))) == 6


def test_error_exit_code(tmp_path, capsys):
    assert main(["posttrain", "--data", str(tmp_path / "missing"), "--out",
                 str(tmp_path / "r.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_pipeline_failure_exit_code(tmp_path, capsys):
    spec = NetworkSpec("tiny_resnet", depth=8, num_classes=3, input_shape=(3, 16, 16))
    wrong_student = NetworkSpec("tiny_resnet", depth=8, num_classes=4,
                                input_shape=(3, 16, 16))
    config = ExperimentConfig(
        dataset_id="synth3",
        dataset_options={"train_per_class": 8, "val_per_class": 4, "image_hw": 16},
        spec=spec,
        pretrain=PretrainConfig("supervised", epochs=1, batch_size=16),
        probe=ProbeConfig(epochs=2),
        recovery=RecoveryConfig(ipc=2, iterations=2, batch_size=4, lr=0.2),
        relabel=RelabelConfig(n_crops=2),
        posttrain=PostTrainConfig(student_spec=wrong_student, epochs=1, batch_size=8),
        output_root=str(tmp_path / "runs"),
    )
    path = tmp_path / "bad.yaml"
    config.to_yaml(path)
    assert main(["run", "--config", str(path)]) == 2
    assert "posttrain" in capsys.readouterr().err
