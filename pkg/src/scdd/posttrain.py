"""Train student models on distilled crops and evaluate them on real data.

The training objective is soft cross-entropy against the stored per-crop
teacher labels: ``L = -sum_i y_i' . log softmax(student(crop_i))``. Students
never see the uncropped synthetic image. Evaluation reports top-1 accuracy on
a real validation set, and ``deviation_gap`` measures how far a
distilled-data student's per-sample validation losses sit from a full-data
model's.

Two controls calibrate the distilled result: noise images carrying the same
soft labels, and a random real subset of the same size with hard labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, denormalize_images, float_to_uint8, normalize_images
from .errors import ConfigurationError, DataError
from .netcore import NetworkSpec, TrainedBackbone, build_network
from .relabel import DistilledDataset, RRCParams, extract_crop, generate_crops
from .utils import cosine_lr, set_lr


@dataclass
class PostTrainConfig:
    student_spec: NetworkSpec
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.005
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    lr_schedule: str = "cosine"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.student_spec.validate()


@dataclass
class EvalReport:
    top1: float
    loss_gap: dict | None = None  # {"mean_abs_gap", "sup_gap"} vs a full-data model
    budget_curve: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"top1": self.top1, "loss_gap": self.loss_gap,
                "budget_curve": [[e, a] for e, a in self.budget_curve]}


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum_c target_c * log softmax(logits)_c``.

    Exactly the hard cross-entropy when targets are one-hot.
    """
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def _crop_tensors(dataset: DistilledDataset, spec: NetworkSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Materialize every stored (crop, soft label) pair as normalized tensors."""
    mean = tuple(dataset.manifest["mean"])
    std = tuple(dataset.manifest["std"])
    h, w = spec.input_shape[1], spec.input_shape[2]
    n = dataset.n_crops
    crops = []
    for i in range(len(dataset.images)):
        for crop in dataset.crops[i * n : (i + 1) * n]:
            crops.append(extract_crop(dataset.images[i], crop, (h, w)))
    x = normalize_images(torch.stack(crops), mean, std)
    y = torch.from_numpy(dataset.soft_labels.astype(np.float32))
    return x, y


def _fit_student(x: torch.Tensor, y: torch.Tensor, cfg: PostTrainConfig,
                 val_dataset: ImageDataset | None, eval_every: int,
                 dataset_id: str) -> tuple[TrainedBackbone, list[tuple[int, float]]]:
    student = build_network(cfg.student_spec, cfg.seed)
    n = len(x)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.AdamW(student.parameters(), lr=cfg.lr, betas=cfg.betas,
                                  weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    budget_curve: list[tuple[int, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        student.train()
        perm = torch.randperm(n, generator=g)
        for idx in perm.split(cfg.batch_size):
            set_lr(optimizer, cosine_lr(cfg.lr, step, total_steps))
            loss = soft_cross_entropy(student(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        if val_dataset is not None and (epoch + 1) % eval_every == 0:
            budget_curve.append((epoch + 1, evaluate(student, val_dataset)))
    student.eval()
    student.provenance.objective = "supervised"
    student.provenance.epochs = cfg.epochs
    student.provenance.dataset_id = dataset_id
    student.provenance.seed = cfg.seed
    student.provenance.aligned = True
    return student, budget_curve


def train_on_distilled(
    dataset: DistilledDataset,
    cfg: PostTrainConfig,
    val_dataset: ImageDataset | None = None,
    eval_every: int = 1,
) -> tuple[TrainedBackbone, list[tuple[int, float]]]:
    """Fit a student on the stored crops; optionally track val top-1 per epoch."""
    cfg.validate()
    dataset.validate()
    if dataset.num_classes != cfg.student_spec.num_classes:
        raise DataError(
            f"distilled data has {dataset.num_classes} classes, student spec "
            f"{cfg.student_spec.num_classes}"
        )
    x, y = _crop_tensors(dataset, cfg.student_spec)
    return _fit_student(x, y, cfg, val_dataset, eval_every, dataset_id="distilled")


def train_on_real(dataset: ImageDataset, cfg: PostTrainConfig,
                  val_dataset: ImageDataset | None = None,
                  eval_every: int = 1) -> tuple[TrainedBackbone, list[tuple[int, float]]]:
    """Same loop on real labeled images (one-hot targets); the full-data reference."""
    cfg.validate()
    if not dataset.labeled:
        raise DataError("need labels to train the full-data reference")
    x = dataset.to_tensor()
    y = F.one_hot(dataset.label_tensor(), dataset.num_classes).to(torch.float32)
    return _fit_student(x, y, cfg, val_dataset, eval_every,
                        dataset_id=dataset.dataset_id)


@torch.no_grad()
def evaluate(model: TrainedBackbone, val: ImageDataset, batch_size: int = 256) -> float:
    """Fraction of validation images whose argmax prediction is correct."""
    if val.num_classes != model.spec.num_classes:
        raise DataError(f"validation set has {val.num_classes} classes, model "
                        f"{model.spec.num_classes}")
    was_training = model.training
    model.eval()
    correct = 0
    x = val.to_tensor()
    y = val.label_tensor()
    for start in range(0, len(val), batch_size):
        logits = model(x[start : start + batch_size])
        correct += int((logits.argmax(dim=1) == y[start : start + batch_size]).sum())
    model.train(was_training)
    return correct / len(val)


@torch.no_grad()
def per_sample_losses(model: TrainedBackbone, val: ImageDataset,
                      batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    losses = []
    x = val.to_tensor()
    y = val.label_tensor()
    for start in range(0, len(val), batch_size):
        logits = model(x[start : start + batch_size])
        losses.append(F.cross_entropy(logits, y[start : start + batch_size],
                                      reduction="none"))
    model.train(was_training)
    return torch.cat(losses).numpy()


def deviation_gap(full_model: TrainedBackbone, distilled_model: TrainedBackbone,
                  val: ImageDataset) -> dict:
    """Per-sample |loss difference| on validation data: mean and supremum."""
    gap = np.abs(per_sample_losses(full_model, val) - per_sample_losses(distilled_model, val))
    return {"mean_abs_gap": float(gap.mean()), "sup_gap": float(gap.max())}


def make_noise_control(dataset: DistilledDataset, seed: int = 0) -> DistilledDataset:
    """Same crops and soft labels, but the images are quantized Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    n, h, w, c = dataset.images.shape
    noise = torch.randn(n, c, h, w, generator=g)
    mean = tuple(dataset.manifest["mean"])
    std = tuple(dataset.manifest["std"])
    pixels = float_to_uint8(denormalize_images(noise, mean, std))
    manifest = dict(dataset.manifest)
    manifest["control"] = "noise_images"
    manifest.pop("checksums", None)
    manifest.pop("images", None)
    control = replace(dataset, images=pixels, manifest=manifest)
    control.validate()
    return control


def real_subset_distilled(train: ImageDataset, ipc: int, n_crops: int = 4,
                          rrc: RRCParams | None = None, seed: int = 0) -> DistilledDataset:
    """Random real images (ipc per class) packaged with one-hot labels as crops."""
    if not train.labeled:
        raise DataError("need labels to draw a class-balanced subset")
    rrc = rrc or RRCParams()
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        if len(idx) < ipc:
            raise DataError(f"class {c} has only {len(idx)} images, need {ipc}")
        picks.extend(rng.choice(idx, size=ipc, replace=False))
    picks = np.array(picks)
    images = train.images[picks]
    classes = train.labels[picks]
    ids, crops, labels = [], [], []
    counters: dict[int, int] = {}
    for i, cls in enumerate(classes):
        j = counters.get(int(cls), 0)
        counters[int(cls)] = j + 1
        image_id = f"class_{cls}/img_{j:05d}"
        ids.append(image_id)
        crops.extend(generate_crops(images[i], n_crops, rrc, seed=seed + i * 9973,
                                    image_id=image_id))
        onehot = np.zeros((n_crops, train.num_classes), dtype=np.float32)
        onehot[:, int(cls)] = 1.0
        labels.append(onehot)
    manifest = {
        "format": "scdd-dd-v1",
        "teacher": {"objective": "real_subset", "epochs": 0,
                    "dataset_id": train.dataset_id, "seed": seed},
        "recovery": {},
        "n_crops": n_crops,
        "num_classes": train.num_classes,
        "mean": list(train.mean),
        "std": list(train.std),
        "channels": images.shape[-1],
        "control": "real_subset",
    }
    control = DistilledDataset(images=images, image_classes=classes.astype(np.int64),
                               image_ids=ids, crops=crops,
                               soft_labels=np.concatenate(labels), manifest=manifest)
    control.validate()
    return control
