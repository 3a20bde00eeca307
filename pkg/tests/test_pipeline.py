"""Pipeline orchestration: manifests, resume, hashing, and teacher comparison."""

import json
import shutil
from dataclasses import replace

import pytest

from scdd.errors import ConfigurationError
from scdd.netcore import NetworkSpec
from scdd.pipeline import (
    ExperimentConfig,
    PipelineError,
    RelabelConfig,
    compare_teachers,
    config_diff,
    run_dir_for,
    run_pipeline,
)
from scdd.posttrain import PostTrainConfig
from scdd.recover import RecoveryConfig
from scdd.squeeze import PretrainConfig, ProbeConfig


def micro_config(output_root, **overrides) -> ExperimentConfig:
    spec = NetworkSpec("tiny_resnet", depth=8, num_classes=3, input_shape=(3, 16, 16))
    base = dict(
        dataset_id="synth3",
        dataset_options={"train_per_class": 15, "val_per_class": 6, "image_hw": 16},
        spec=spec,
        pretrain=PretrainConfig("supervised", epochs=3, batch_size=32),
        probe=ProbeConfig(epochs=5),
        recovery=RecoveryConfig(ipc=2, iterations=6, batch_size=4, lr=0.2),
        relabel=RelabelConfig(n_crops=2),
        posttrain=PostTrainConfig(student_spec=spec, epochs=3, batch_size=16),
        output_root=str(output_root),
        global_seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = micro_config(root)
    manifest = run_pipeline(config)
    return config, manifest


class TestRunPipeline:
    def test_all_stages_complete(self, finished_run):
        config, manifest = finished_run
        assert set(manifest["stages"]) == {"squeeze", "probe", "recover", "relabel",
                                           "posttrain", "analyze"}
        assert all(s["status"] == "done" for s in manifest["stages"].values())
        rd = run_dir_for(config)
        for rel in ("pretrain.ckpt", "teacher.ckpt", "synthetic.pt", "trajectory.csv",
                    "distilled/manifest.json", "student.ckpt", "report.json",
                    "analysis/cluster_report.json", "manifest.json"):
            assert (rd / rel).exists(), rel

    def test_rerun_skips_everything(self, finished_run):
        config, _ = finished_run
        before = (run_dir_for(config) / "manifest.json").read_text()
        logs = []
        run_pipeline(config, log=logs.append)
        assert all("skipping" in line for line in logs)
        assert (run_dir_for(config) / "manifest.json").read_text() == before

    def test_deleting_intermediate_reruns_downstream(self, finished_run):
        config, _ = finished_run
        shutil.rmtree(run_dir_for(config) / "distilled")
        logs = []
        run_pipeline(config, log=logs.append)
        ran = {line.split("]")[0][1:] for line in logs if "running" in line}
        skipped = {line.split("]")[0][1:] for line in logs if "skipping" in line}
        assert ran == {"relabel", "posttrain", "analyze"}
        assert skipped == {"squeeze", "probe", "recover"}

    def test_report_contents(self, finished_run):
        config, _ = finished_run
        report = json.loads((run_dir_for(config) / "report.json").read_text())
        assert 0.0 <= report["top1"] <= 1.0
        assert len(report["budget_curve"]) == config.posttrain.epochs

    def test_failure_recorded_and_downstream_not_run(self, tmp_path):
        bad_spec = NetworkSpec("tiny_resnet", depth=8, num_classes=4,
                               input_shape=(3, 16, 16))
        config = micro_config(tmp_path, posttrain=PostTrainConfig(
            student_spec=bad_spec, epochs=2, batch_size=16))
        with pytest.raises(PipelineError) as err:
            run_pipeline(config)
        assert err.value.stage == "posttrain"
        manifest = json.loads((run_dir_for(config) / "manifest.json").read_text())
        assert manifest["failure"]["stage"] == "posttrain"
        assert "analyze" not in manifest["stages"]

    def test_end_to_end_deterministic(self, tmp_path, finished_run):
        config, _ = finished_run
        twin = replace(config, output_root=str(tmp_path / "twin"))
        run_pipeline(twin)
        a = json.loads((run_dir_for(config) / "report.json").read_text())
        b = json.loads((run_dir_for(twin) / "report.json").read_text())
        assert a["top1"] == b["top1"]
        assert a["budget_curve"] == b["budget_curve"]

    def test_until_stops_early(self, tmp_path):
        config = micro_config(tmp_path)
        manifest = run_pipeline(config, until="probe")
        assert set(manifest["stages"]) == {"squeeze", "probe"}


class TestConfigHash:
    def test_yaml_roundtrip_stable(self, tmp_path):
        config = micro_config(tmp_path)
        path = tmp_path / "config.yaml"
        config.to_yaml(path)
        assert ExperimentConfig.from_yaml(path).config_hash() == config.config_hash()

    def test_any_field_changes_hash(self, tmp_path):
        config = micro_config(tmp_path)
        variants = [
            replace(config, global_seed=1),
            replace(config, dataset_id="synth4"),
            replace(config, pretrain=replace(config.pretrain, learning_rate=0.05)),
            replace(config, recovery=replace(config.recovery, alpha=0.01)),
            replace(config, relabel=replace(config.relabel, n_crops=3)),
            replace(config, posttrain=replace(config.posttrain, epochs=4)),
        ]
        hashes = {config.config_hash()} | {v.config_hash() for v in variants}
        assert len(hashes) == len(variants) + 1

    def test_config_diff_paths(self, tmp_path):
        a = micro_config(tmp_path)
        b = replace(a, pretrain=replace(a.pretrain, learning_rate=0.999))
        assert config_diff(a, b) == ["pretrain.learning_rate"]


class TestCompareTeachers:
    def test_arms_differing_beyond_objective_refused(self, tmp_path):
        a = micro_config(tmp_path)
        b = replace(a, pretrain=replace(a.pretrain, objective="contrastive",
                                        learning_rate=0.5))
        with pytest.raises(ConfigurationError, match="learning_rate"):
            compare_teachers(a, b)

    def test_explicit_objective_pair_accepted_shape(self, tmp_path):
        a = micro_config(tmp_path / "arm_a")
        b = replace(a, pretrain=replace(a.pretrain, objective="contrastive"),
                    output_root=str(tmp_path / "arm_b"))
        report = compare_teachers(a, b)
        assert set(report["arms"]) == {"supervised", "contrastive"}
        assert report["trajectories_equal_length"]
        assert set(report["paired_top1"]) == {"supervised", "contrastive"}
        assert report["informativeness"]["verdict"] in {"a", "b", "tie"}
        assert (tmp_path / "arm_a" / "compare_report.json").exists()

    def test_derived_arms(self, tmp_path):
        config = micro_config(tmp_path)
        report = compare_teachers(config)
        assert {a for a in report["arms"]} == {"supervised", "contrastive"}
        for arm in report["arms"].values():
            assert arm["iteration0_bn_loss"] > 0
