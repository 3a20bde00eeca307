"""Command-line entry points.

Verbs mirror the pipeline stages plus orchestration: ``squeeze``, ``probe``,
``recover``, ``relabel``, ``posttrain``, ``analyze``, ``bnstats``, ``run``,
``compare-teachers`` and a ``dataset`` helper that materializes the
procedural corpus as a folder of PNGs. Exit code is 0 on success, 2 with the
failing stage named on a pipeline failure, 1 on any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .analysis import cluster_images, emit_plots
from .bnstats import compare_informativeness, informativeness_report
from .data import (
    denormalize_images,
    float_to_uint8,
    generate_synthetic_dataset,
    load_imagefolder,
    resolve_dataset,
    write_imagefolder,
)
from .netcore import NetworkSpec, checkpoint_snapshot, load_checkpoint
from .pipeline import ExperimentConfig, PipelineError, compare_teachers, run_pipeline
from .posttrain import PostTrainConfig, evaluate, train_on_distilled
from .recover import RecoveryConfig, SyntheticBatch, recover_dataset
from .relabel import RRCParams, build_distilled, load_distilled, pack_distilled
from .utils import atomic_write_json


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, global_seed=args.seed)
    if getattr(args, "deterministic", False):
        config = replace(config, deterministic=True)
    return config


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config YAML")
    p.add_argument("--seed", type=int, default=None, help="override global seed")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--no-resume", action="store_true", help="ignore existing outputs")


def _cmd_stage(until: str):
    def handler(args) -> int:
        config = _load_config(args)
        manifest = run_pipeline(config, resume=not args.no_resume, log=print, until=until)
        print(json.dumps({s: r["status"] for s, r in manifest["stages"].items()}))
        return 0
    return handler


def _cmd_run(args) -> int:
    config = _load_config(args)
    manifest = run_pipeline(config, resume=not args.no_resume, log=print)
    report_path = Path(config.output_root) / f"run_{config.config_hash()[:12]}" / "report.json"
    print(report_path.read_text())
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args)
    report = compare_teachers(config, resume=not args.no_resume, log=print)
    print(json.dumps(report["paired_top1"], indent=2))
    return 0


def _cmd_recover(args) -> int:
    teacher = load_checkpoint(args.teacher)
    cfg = RecoveryConfig(ipc=args.ipc, iterations=args.iters, alpha=args.alpha,
                         first_bn_multiplier=args.first_bn_mult,
                         batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    synthetic, trajectory = recover_dataset(teacher, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "scdd-syn-v1", "images": synthetic.images,
                "labels": synthetic.labels}, out / "synthetic.pt")
    trajectory.to_csv(out / "trajectory.csv")
    channels = synthetic.images.shape[1]
    pixels = float_to_uint8(denormalize_images(
        synthetic.images, (0.5,) * channels, (0.25,) * channels))
    counters: dict[int, int] = {}
    for img, label in zip(pixels, synthetic.labels.tolist()):
        cls_dir = out / "images" / f"class_{label}"
        cls_dir.mkdir(parents=True, exist_ok=True)
        j = counters.get(label, 0)
        counters[label] = j + 1
        arr = img[..., 0] if img.shape[-1] == 1 else img
        Image.fromarray(arr).save(cls_dir / f"img_{j:05d}.png")
    print(f"wrote {len(pixels)} images and trajectory.csv under {out}")
    return 0


def _cmd_relabel(args) -> int:
    teacher = load_checkpoint(args.teacher)
    payload = torch.load(args.synthetic, weights_only=True)
    synthetic = SyntheticBatch(payload["images"], payload["labels"])
    distilled = build_distilled(teacher, synthetic, n_crops=args.crops,
                                rrc=RRCParams(), seed=args.seed,
                                temperature=args.temperature)
    pack_distilled(distilled, args.out)
    print(f"packed {len(distilled.images)} images x {args.crops} crops into {args.out}")
    return 0


def _cmd_posttrain(args) -> int:
    distilled = load_distilled(args.data)
    train, val = resolve_dataset(args.dataset)
    c, h, w = val.input_shape
    spec = NetworkSpec(args.arch, depth=args.depth, num_classes=distilled.num_classes,
                       input_shape=(c, h, w))
    cfg = PostTrainConfig(student_spec=spec, epochs=args.epochs, seed=args.seed)
    student, curve = train_on_distilled(distilled, cfg, val_dataset=val)
    report = {"top1": evaluate(student, val), "loss_gap": None,
              "budget_curve": [[e, a] for e, a in curve]}
    atomic_write_json(args.out, report)
    print(json.dumps({"top1": report["top1"]}))
    return 0


def _cmd_analyze(args) -> int:
    if args.what != "cluster":
        raise SystemExit(f"unknown analysis {args.what!r}")
    data_root = Path(args.data)
    if (data_root / "manifest.json").exists():
        distilled = load_distilled(data_root)
        images, classes = distilled.images, distilled.image_classes
        names = [f"class_{c}" for c in sorted(set(classes.tolist()))]
    else:
        folder = load_imagefolder(data_root)
        images, classes = folder.images, folder.labels
        names = folder.class_names
    if args.classes:
        wanted = set(args.classes.split(","))
        keep_ids = [i for i, name in enumerate(names) if name in wanted
                    or str(i) in wanted]
        if not keep_ids:
            raise SystemExit(f"none of {sorted(wanted)} found among {names}")
        mask = np.isin(classes, keep_ids)
        images, classes = images[mask], classes[mask]
    report = cluster_images(images, classes, k=args.k)
    atomic_write_json(args.out, report.to_dict())
    if args.plots:
        emit_plots(report, args.plots)
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_bnstats(args) -> int:
    snapshots = [(Path(p).stem, checkpoint_snapshot(p)) for p in args.ckpt]
    payload = {"reports": [informativeness_report(s, name).to_dict()
                           for name, s in snapshots]}
    if len(snapshots) == 2:
        (name_a, a), (name_b, b) = snapshots
        payload["comparison"] = compare_informativeness(a, b, name_a, name_b).to_dict()
    atomic_write_json(args.out, payload)
    if args.plot:
        for name, snap in snapshots:
            emit_plots(snap, Path(args.plot) / name)
    if "comparison" in payload:
        print(f"verdict: {payload['comparison']['verdict']}")
    else:
        print(f"wrote {args.out}")
    return 0


def _cmd_dataset(args) -> int:
    k = int(args.id.removeprefix("synth"))
    out = Path(args.out)
    for split, per_class in (("train", args.train_per_class), ("val", args.val_per_class)):
        ds = generate_synthetic_dataset(num_classes=k, per_class=per_class,
                                        image_hw=args.image_hw, seed=args.seed,
                                        split=split)
        write_imagefolder(ds, out / split)
    print(f"materialized {args.id} under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scdd",
                                     description="BN-statistic-matching dataset distillation")
    parser.add_argument("--version", action="version", version=f"scdd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in ("squeeze", "probe"):
        p = sub.add_parser(stage, help=f"run the pipeline through the {stage} stage")
        _add_config_args(p)
        p.set_defaults(handler=_cmd_stage(stage))

    p = sub.add_parser("run", help="run the full pipeline")
    _add_config_args(p)
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("compare-teachers",
                       help="run supervised and contrastive arms and compare")
    _add_config_args(p)
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("recover", help="synthesize images from a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ipc", type=int, default=10)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.005)
    p.add_argument("--first-bn-mult", type=float, default=10.0)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_recover)

    p = sub.add_parser("relabel", help="attach crop-level soft labels to synthetic images")
    p.add_argument("--teacher", required=True)
    p.add_argument("--synthetic", required=True, help="synthetic.pt from recover")
    p.add_argument("--out", required=True)
    p.add_argument("--crops", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(handler=_cmd_relabel)

    p = sub.add_parser("posttrain", help="train a student on a packed distilled dataset")
    p.add_argument("--data", required=True, help="distilled dataset directory")
    p.add_argument("--arch", default="tiny_resnet")
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--dataset", default="synth10", help="validation dataset id")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_posttrain)

    p = sub.add_parser("analyze", help="synthetic data analytics")
    p.add_argument("what", choices=["cluster"])
    p.add_argument("--data", required=True)
    p.add_argument("--classes", default="", help="comma-separated class names or indices")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", default="")
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("bnstats", help="BN informativeness report / comparison")
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint path (repeat for a comparison)")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default="")
    p.set_defaults(handler=_cmd_bnstats)

    p = sub.add_parser("dataset", help="materialize the procedural corpus as PNG folders")
    p.add_argument("--id", default="synth10")
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--val-per-class", type=int, default=30)
    p.add_argument("--image-hw", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_dataset)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
