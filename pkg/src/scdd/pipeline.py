"""End-to-end orchestration: squeeze -> probe -> recover -> relabel ->
posttrain -> analyze, as resumable runs keyed by a config hash.

Each stage reads its inputs from files written by the previous stage and
records its outputs (with checksums) in the run manifest, so a rerun skips
everything whose outputs are intact and re-executes only what is missing.
``compare_teachers`` runs the pipeline twice with arms differing only in the
pretraining objective and reports paired diagnostics.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import yaml

from . import __version__
from .bnstats import compare_informativeness, informativeness_report
from .data import resolve_dataset
from .errors import ConfigurationError
from .netcore import (
    NetworkSpec,
    checkpoint_snapshot,
    extract_bn_statistics,
    load_checkpoint,
    save_checkpoint,
)
from .posttrain import (
    EvalReport,
    PostTrainConfig,
    deviation_gap,
    evaluate,
    make_noise_control,
    real_subset_distilled,
    train_on_distilled,
    train_on_real,
)
from .recover import (
    LossTrajectory,
    RecoveryConfig,
    SyntheticBatch,
    TrajectoryPoint,
    recover_dataset,
)
from .relabel import RRCParams, build_distilled, load_distilled, pack_distilled
from .analysis import cluster_images, emit_plots
from .squeeze import (
    AugmentationPolicy,
    PretrainConfig,
    ProbeConfig,
    linear_probe,
    pretrain_contrastive,
    pretrain_supervised,
)
from .utils import atomic_write_json, canonical_json, sha256_bytes, sha256_file

STAGES = ("squeeze", "probe", "recover", "relabel", "posttrain", "analyze")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RelabelConfig:
    n_crops: int = 4
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    seed: int = 0
    temperature: float = 1.0


@dataclass
class ExperimentConfig:
    dataset_id: str = "synth10"
    dataset_options: dict = field(default_factory=dict)
    spec: NetworkSpec = field(default_factory=lambda: NetworkSpec("tiny_resnet"))
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig("supervised"))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    relabel: RelabelConfig = field(default_factory=RelabelConfig)
    posttrain: PostTrainConfig | None = None  # student_spec defaults to `spec`
    output_root: str = "runs"
    global_seed: int = 0
    deterministic: bool = False
    with_full_baseline: bool = False
    with_controls: bool = False
    analyze_k: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.posttrain is None:
            self.posttrain = PostTrainConfig(student_spec=self.spec)

    def validate(self) -> None:
        self.spec.validate()
        self.pretrain.validate()
        self.recovery.validate()
        self.posttrain.validate()
        if self.relabel.n_crops < 1:
            raise ConfigurationError("relabel.n_crops must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "spec" in d:
            spec = dict(d["spec"])
            spec["input_shape"] = tuple(spec["input_shape"])
            d["spec"] = NetworkSpec(**spec)
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig(**d["pretrain"])
        if "probe" in d:
            d["probe"] = ProbeConfig(**d["probe"])
        if "recovery" in d:
            rec = dict(d["recovery"])
            if rec.get("betas") is not None:
                rec["betas"] = tuple(rec["betas"])
            if rec.get("crop_scale") is not None:
                rec["crop_scale"] = tuple(rec["crop_scale"])
            d["recovery"] = RecoveryConfig(**rec)
        if "relabel" in d:
            rl = dict(d["relabel"])
            rl["scale"] = tuple(rl.get("scale", (0.08, 1.0)))
            rl["ratio"] = tuple(rl.get("ratio", (0.75, 4 / 3)))
            d["relabel"] = RelabelConfig(**rl)
        if d.get("posttrain"):
            pt = dict(d["posttrain"])
            student = dict(pt["student_spec"])
            student["input_shape"] = tuple(student["input_shape"])
            pt["student_spec"] = NetworkSpec(**student)
            if pt.get("betas") is not None:
                pt["betas"] = tuple(pt["betas"])
            d["posttrain"] = PostTrainConfig(**pt)
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())

    def seeded(self, stage_cfg, attr: str = "seed"):
        """Stage config with the run's global seed folded into its own seed."""
        return replace(stage_cfg, **{attr: getattr(stage_cfg, attr) + self.global_seed})


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Dotted paths of every field where the two configs differ."""
    fa, fb = _flatten(a.to_dict()), _flatten(b.to_dict())
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))


class _Run:
    """One pipeline execution rooted at output_root/run_<hash>."""

    def __init__(self, config: ExperimentConfig, resume: bool = True, log=None):
        config.validate()
        self.config = config
        self.resume = resume
        self.log = log or (lambda msg: None)
        self.run_dir = Path(config.output_root) / f"run_{config.config_hash()[:12]}"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.run_dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {
                "config_hash": config.config_hash(),
                "tool_version": __version__,
                "global_seed": config.global_seed,
                "config": config.to_dict(),
                "stages": {},
            }
        self._train = None
        self._val = None

    # -- dataset ------------------------------------------------------------
    def dataset(self):
        if self._train is None:
            self._train, self._val = resolve_dataset(self.config.dataset_id,
                                                     self.config.dataset_options)
        return self._train, self._val

    # -- manifest bookkeeping -------------------------------------------------
    def _stage_intact(self, name: str) -> bool:
        record = self.manifest["stages"].get(name)
        if not record or record.get("status") != "done":
            return False
        for rel, digest in record["outputs"].items():
            target = self.run_dir / rel
            if not target.exists() or sha256_file(target) != digest:
                return False
        return True

    def _record(self, name: str, outputs: list[str], wall_clock: float) -> None:
        self.manifest["stages"][name] = {
            "status": "done",
            "outputs": {rel: sha256_file(self.run_dir / rel) for rel in outputs},
            "wall_clock_s": round(wall_clock, 3),
        }
        self.manifest.pop("failure", None)
        atomic_write_json(self.manifest_path, self.manifest)

    def _record_failure(self, name: str, error: BaseException) -> None:
        self.manifest["failure"] = {"stage": name, "error": str(error)}
        atomic_write_json(self.manifest_path, self.manifest)

    def execute(self, until: str | None = None) -> dict:
        if until is not None and until not in STAGES:
            raise ConfigurationError(f"unknown stage {until!r}")
        cfg = self.config
        threads = torch.get_num_threads()
        if cfg.deterministic:
            torch.set_num_threads(1)
        try:
            stage_fns = {
                "squeeze": (self._squeeze, ["pretrain.ckpt"]),
                "probe": (self._probe, ["teacher.ckpt"]),
                "recover": (self._recover,
                            ["synthetic.pt", "trajectory.csv", "recover_stats.json"]),
                "relabel": (self._relabel, ["distilled/manifest.json"]),
                "posttrain": (self._posttrain, ["student.ckpt", "report.json"]),
                "analyze": (self._analyze, ["analysis/cluster_report.json"]),
            }
            dirty = False  # once a stage re-runs, everything downstream must too
            for name in STAGES:
                fn, outputs = stage_fns[name]
                if self.resume and not dirty and self._stage_intact(name):
                    self.log(f"[{name}] up to date, skipping")
                else:
                    dirty = True
                    self.log(f"[{name}] running")
                    start = time.perf_counter()
                    try:
                        fn()
                    except Exception as e:
                        self._record_failure(name, e)
                        raise PipelineError(name, e) from e
                    self._record(name, outputs, time.perf_counter() - start)
                if name == until:
                    break
        finally:
            if cfg.deterministic:
                torch.set_num_threads(threads)
        return self.manifest

    # -- stages ---------------------------------------------------------------
    def _squeeze(self):
        cfg = self.config
        train, _ = self.dataset()
        pre = cfg.seeded(cfg.pretrain)
        if pre.objective == "supervised":
            model = pretrain_supervised(train, cfg.spec, pre)
        else:
            model = pretrain_contrastive(train, cfg.spec, pre, AugmentationPolicy())
        save_checkpoint(model, self.run_dir / "pretrain.ckpt")

    def _probe(self):
        cfg = self.config
        train, _ = self.dataset()
        model = load_checkpoint(self.run_dir / "pretrain.ckpt")
        teacher = linear_probe(model, train, cfg.seeded(cfg.probe))
        save_checkpoint(teacher, self.run_dir / "teacher.ckpt")

    def _recover(self):
        cfg = self.config
        teacher = load_checkpoint(self.run_dir / "teacher.ckpt")
        rec_cfg = cfg.seeded(cfg.recovery)
        synthetic, trajectory = recover_dataset(teacher, rec_cfg)
        torch.save({"format": "scdd-syn-v1", "images": synthetic.images,
                    "labels": synthetic.labels}, self.run_dir / "synthetic.pt")
        trajectory.to_csv(self.run_dir / "trajectory.csv")
        stats = {
            "iteration0_bn_loss": trajectory.points[0].bn_loss,
            "iteration0_ce_loss": trajectory.points[0].ce_loss,
            "final_bn_loss": trajectory.points[-1].bn_loss,
            "iterations": len(trajectory),
            "per_batch": [
                {"class": t.class_label, "initial_bn": t.initial_bn,
                 "final_bn": t.final_bn}
                for t in trajectory.per_batch
            ],
        }
        atomic_write_json(self.run_dir / "recover_stats.json", stats)

    def _relabel(self):
        cfg = self.config
        train, _ = self.dataset()
        teacher = load_checkpoint(self.run_dir / "teacher.ckpt")
        payload = torch.load(self.run_dir / "synthetic.pt", weights_only=True)
        synthetic = SyntheticBatch(payload["images"], payload["labels"])
        rl = cfg.seeded(cfg.relabel)
        distilled = build_distilled(
            teacher, synthetic, recovery_config=cfg.recovery,
            n_crops=rl.n_crops, rrc=RRCParams(rl.scale, rl.ratio), seed=rl.seed,
            mean=train.mean, std=train.std, temperature=rl.temperature,
        )
        pack_distilled(distilled, self.run_dir / "distilled")

    def _posttrain(self):
        cfg = self.config
        train, val = self.dataset()
        distilled = load_distilled(self.run_dir / "distilled")
        pt_cfg = cfg.seeded(cfg.posttrain)
        student, curve = train_on_distilled(distilled, pt_cfg, val_dataset=val,
                                            eval_every=cfg.eval_every)
        top1 = evaluate(student, val)
        report = EvalReport(top1=top1, budget_curve=curve)
        extras: dict = {}
        if cfg.with_full_baseline:
            full_model, _ = train_on_real(train, pt_cfg, val_dataset=None)
            extras["full_data_top1"] = evaluate(full_model, val)
            report.loss_gap = deviation_gap(full_model, student, val)
        if cfg.with_controls:
            noise = make_noise_control(distilled, seed=cfg.global_seed)
            noise_student, _ = train_on_distilled(noise, pt_cfg)
            extras["noise_control_top1"] = evaluate(noise_student, val)
            subset = real_subset_distilled(train, cfg.recovery.ipc,
                                           n_crops=cfg.relabel.n_crops,
                                           seed=cfg.global_seed)
            subset_student, _ = train_on_distilled(subset, pt_cfg)
            extras["real_subset_top1"] = evaluate(subset_student, val)
        save_checkpoint(student, self.run_dir / "student.ckpt")
        payload = report.to_dict()
        payload.update(extras)
        atomic_write_json(self.run_dir / "report.json", payload)

    def _analyze(self):
        cfg = self.config
        distilled = load_distilled(self.run_dir / "distilled")
        report = cluster_images(distilled.images, distilled.image_classes,
                                k=cfg.analyze_k)
        out = self.run_dir / "analysis"
        out.mkdir(exist_ok=True)
        atomic_write_json(out / "cluster_report.json", report.to_dict())
        emit_plots(report, out)
        emit_plots(_trajectory_from_csv(self.run_dir / "trajectory.csv"), out)
        teacher = load_checkpoint(self.run_dir / "teacher.ckpt")
        snapshot = extract_bn_statistics(teacher)
        emit_plots(snapshot, out / "bn_layers")
        atomic_write_json(out / "informativeness.json",
                          informativeness_report(snapshot, "teacher").to_dict())


def _trajectory_from_csv(path) -> LossTrajectory:
    points = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            points.append(TrajectoryPoint(int(row["iter"]), float(row["ce"]),
                                          float(row["bn"]), float(row["total"])))
    return LossTrajectory(points)


def run_pipeline(config: ExperimentConfig, resume: bool = True, log=None,
                 until: str | None = None) -> dict:
    """Execute the stages in order (optionally stopping after ``until``).

    Returns the run manifest, which is also kept up to date on disk at each
    stage boundary.
    """
    return _Run(config, resume=resume, log=log).execute(until=until)


def run_dir_for(config: ExperimentConfig) -> Path:
    return Path(config.output_root) / f"run_{config.config_hash()[:12]}"


def with_config_field(config, path: str, value):
    """Copy of a (nested) config dataclass with one dotted field replaced.

    ``path`` is dotted, e.g. ``recovery.iterations`` or ``posttrain.epochs``.
    """
    head, _, rest = path.partition(".")
    if not hasattr(config, head):
        raise ConfigurationError(f"{type(config).__name__} has no field {head!r}")
    if not rest:
        return replace(config, **{head: value})
    return replace(config, **{head: with_config_field(getattr(config, head), rest, value)})


def ablation_sweep(
    config: ExperimentConfig,
    field_path: str,
    values,
    resume: bool = True,
    log=None,
) -> dict:
    """Run the full pipeline once per value of one config field.

    Results land under ``output_root/sweep_<field>/<value>``; the returned
    report carries one row per value (top1, initial/final bn loss, wall
    clock) plus a plain-text comparison table, and is written to
    ``sweep_<field>.json`` under the output root.
    """
    base_root = Path(config.output_root)
    slug = field_path.replace(".", "_")
    rows = []
    for value in values:
        arm = with_config_field(config, field_path, value)
        arm = replace(arm, output_root=str(base_root / f"sweep_{slug}" / str(value)))
        manifest = run_pipeline(arm, resume=resume, log=log)
        rd = run_dir_for(arm)
        stats = json.loads((rd / "recover_stats.json").read_text())
        report = json.loads((rd / "report.json").read_text())
        rows.append({
            "value": value,
            "top1": report["top1"],
            "iteration0_bn_loss": stats["iteration0_bn_loss"],
            "final_bn_loss": stats["final_bn_loss"],
            "wall_clock_s": sum(s["wall_clock_s"] for s in manifest["stages"].values()),
            "run_dir": str(rd),
        })
    header = f"{field_path:>28} {'top1':>8} {'bn_init':>10} {'bn_final':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['value']!s:>28} {row['top1']:>8.4f} "
                     f"{row['iteration0_bn_loss']:>10.3f} {row['final_bn_loss']:>10.3f}")
    report = {"field": field_path, "rows": rows, "table": "\n".join(lines)}
    base_root.mkdir(parents=True, exist_ok=True)
    atomic_write_json(base_root / f"sweep_{slug}.json", report)
    return report


def compare_teachers(
    config: ExperimentConfig,
    config_b: ExperimentConfig | None = None,
    objectives: tuple[str, str] = ("supervised", "contrastive"),
    resume: bool = True,
    log=None,
) -> dict:
    """Run two pipeline arms differing only in the pretraining objective.

    If a second config is passed explicitly it must be identical to the first
    everywhere except ``pretrain.objective`` (and ``output_root``); any other
    drift is refused with the list of differing fields.
    """
    if set(objectives) != {"supervised", "contrastive"}:
        raise ConfigurationError("objectives must be supervised and contrastive")
    if config_b is not None:
        allowed = {"pretrain.objective", "output_root"}
        drift = [d for d in config_diff(config, config_b) if d not in allowed]
        if drift:
            raise ConfigurationError(
                "compare_teachers arms differ beyond the objective: " + ", ".join(drift)
            )
        arm_configs = {config.pretrain.objective: config,
                       config_b.pretrain.objective: config_b}
        if set(arm_configs) != set(objectives):
            raise ConfigurationError(
                f"arm objectives {sorted(arm_configs)} do not match {sorted(objectives)}"
            )
    else:
        base_root = Path(config.output_root)
        arm_configs = {
            obj: replace(config,
                         pretrain=replace(config.pretrain, objective=obj),
                         output_root=str(base_root / f"arm_{obj}"))
            for obj in objectives
        }

    arms: dict = {}
    for obj, arm_cfg in arm_configs.items():
        run_pipeline(arm_cfg, resume=resume, log=log)
        rd = run_dir_for(arm_cfg)
        stats = json.loads((rd / "recover_stats.json").read_text())
        report = json.loads((rd / "report.json").read_text())
        arms[obj] = {
            "run_dir": str(rd),
            "iteration0_bn_loss": stats["iteration0_bn_loss"],
            "final_bn_loss": stats["final_bn_loss"],
            "trajectory_len": stats["iterations"],
            "top1": report["top1"],
        }

    snap_by_obj = {
        obj: checkpoint_snapshot(run_dir_for(arm_cfg) / "teacher.ckpt")
        for obj, arm_cfg in arm_configs.items()
    }
    ssl_obj, sl_obj = "contrastive", "supervised"
    comparison = compare_informativeness(snap_by_obj[ssl_obj], snap_by_obj[sl_obj],
                                         name_a=ssl_obj, name_b=sl_obj)
    report = {
        "arms": arms,
        "informativeness": comparison.to_dict(),
        "first_layer_var_of_means": {
            obj: informativeness_report(snap, obj).headline["first_layer_var_of_means"]
            for obj, snap in snap_by_obj.items()
        },
        "paired_top1": {obj: arms[obj]["top1"] for obj in arms},
        "trajectories_equal_length": len({a["trajectory_len"] for a in arms.values()}) == 1,
    }
    out_root = Path(config.output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out_root / "compare_report.json", report)
    return report
