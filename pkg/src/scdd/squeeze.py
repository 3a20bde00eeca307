"""Compress a dataset into a model: pretraining and linear-probe alignment.

Two pretraining objectives are supported. Supervised training fits backbone
and head end-to-end with cross-entropy. Contrastive training fits only the
backbone (plus a throwaway projection head) with an in-batch InfoNCE loss
over two augmented views per image; it never sees labels, and the classifier
head is left untouched for a later linear probe.

The linear probe retrains the head on frozen features. The backbone runs in
inference mode throughout, so its weights and BN running statistics are
bitwise unchanged: that preservation is the point of probing rather than
fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageDataset, UnlabeledImages, normalize_images, uint8_to_float
from .errors import ConfigurationError, DataError
from .netcore import NetworkSpec, Provenance, TrainedBackbone, build_network
from .utils import cosine_lr, seeded_torch, set_lr


@dataclass
class PretrainConfig:
    objective: str  # "supervised" | "contrastive"
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.06
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    temperature: float = 0.2  # contrastive only
    negatives: str = "in_batch"
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in ("supervised", "contrastive"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr_schedule != "cosine":
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.objective == "contrastive":
            if self.temperature <= 0:
                raise ConfigurationError("temperature must be positive")
            if self.batch_size < 4:
                raise ConfigurationError("contrastive training needs batch_size >= 4")
            if self.negatives != "in_batch":
                raise ConfigurationError(f"unknown negative source {self.negatives!r}")


@dataclass
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.03
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0


@dataclass
class AugmentationPolicy:
    """Stochastic view pipeline: resized crop, flip, color jitter, grayscale.

    Defaults lean on aggressive color destruction (strong jitter, frequent
    grayscale) so instance discrimination cannot collapse onto color alone
    and the encoder is pushed toward shape/texture features.
    """

    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter_strength: float = 0.6
    grayscale_p: float = 0.5

    def augment(self, images01: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        out = random_resized_crop(images01, self.crop_scale, self.crop_ratio, generator)
        flip = torch.rand(len(out), generator=generator) < self.flip_p
        if flip.any():
            out[flip] = torch.flip(out[flip], dims=[-1])
        if self.jitter_strength > 0:
            out = color_jitter(out, self.jitter_strength, generator)
        if self.grayscale_p > 0 and out.shape[1] == 3:
            gray = torch.rand(len(out), generator=generator) < self.grayscale_p
            if gray.any():
                out[gray] = to_grayscale(out[gray])
        return out

    def two_views(self, images01: torch.Tensor, generator: torch.Generator):
        return self.augment(images01, generator), self.augment(images01, generator)


def _sample_crop(h, w, scale, ratio, generator) -> tuple[int, int, int, int]:
    """Sample a (top, left, height, width) crop box; center-crop fallback.

    Dimensions are rounded up so the realized area never falls below the
    sampled target (the scale range is a hard lower bound on area fraction).
    """
    area = h * w
    for _ in range(10):
        target = area * (scale[0] + (scale[1] - scale[0]) * torch.rand(1, generator=generator).item())
        log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
        aspect = math.exp(log_ratio[0] + (log_ratio[1] - log_ratio[0])
                          * torch.rand(1, generator=generator).item())
        cw = int(math.ceil(math.sqrt(target * aspect)))
        ch = int(math.ceil(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (1,), generator=generator).item())
            left = int(torch.randint(0, w - cw + 1, (1,), generator=generator).item())
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(images01: torch.Tensor, scale, ratio, generator) -> torch.Tensor:
    n, c, h, w = images01.shape
    out = torch.empty_like(images01)
    for i in range(n):
        top, left, ch, cw = _sample_crop(h, w, scale, ratio, generator)
        patch = images01[i : i + 1, :, top : top + ch, left : left + cw]
        out[i] = F.interpolate(patch, size=(h, w), mode="bilinear", align_corners=False)[0]
    return out


def color_jitter(images01: torch.Tensor, strength: float, generator) -> torch.Tensor:
    n = len(images01)
    lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
    factors = lo + (hi - lo) * torch.rand(3, n, generator=generator)
    out = images01 * factors[0].view(n, 1, 1, 1)  # brightness
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = mean + (out - mean) * factors[1].view(n, 1, 1, 1)  # contrast
    if out.shape[1] == 3:
        gray = to_grayscale(out)
        out = gray + (out - gray) * factors[2].view(n, 1, 1, 1)  # saturation
    return out.clamp(0, 1)


def to_grayscale(images01: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=images01.dtype).view(1, 3, 1, 1)
    return (images01 * weights).sum(dim=1, keepdim=True).expand_as(images01).contiguous()


def info_nce_loss(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over two views.

    Projections are L2-normalized; each sample's positive is its other view
    and the negatives are the remaining samples of the opposite view:
    ``L = -log softmax(q k^T / t)[i, i]`` averaged over i and both directions.
    """
    q = F.normalize(z_a, dim=1)
    k = F.normalize(z_b, dim=1)
    logits = q @ k.t() / temperature
    labels = torch.arange(len(q), device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def _check_spec_matches(dataset, spec: NetworkSpec) -> None:
    if tuple(dataset.input_shape) != tuple(spec.input_shape):
        raise DataError(
            f"dataset shape {dataset.input_shape} != spec input shape {spec.input_shape}"
        )


def pretrain_supervised(dataset: ImageDataset, spec: NetworkSpec,
                        cfg: PretrainConfig) -> TrainedBackbone:
    """Train backbone + head end-to-end with cross-entropy; head comes out aligned."""
    cfg.validate()
    if cfg.objective != "supervised":
        raise ConfigurationError("config objective must be 'supervised'")
    if not dataset.labeled:
        raise DataError("supervised pretraining needs a labeled dataset")
    if dataset.num_classes != spec.num_classes:
        raise DataError(f"dataset has {dataset.num_classes} classes, spec expects {spec.num_classes}")
    _check_spec_matches(dataset, spec)

    model = build_network(spec, cfg.seed)
    x_all = dataset.to_tensor()
    y_all = dataset.label_tensor()
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    model.train()
    step = 0
    accuracy = 0.0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        correct = 0
        for idx in perm.split(cfg.batch_size):
            set_lr(optimizer, cosine_lr(cfg.learning_rate, step, total_steps))
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            correct += int((logits.argmax(dim=1) == y_all[idx]).sum())
            step += 1
        accuracy = correct / n
    model.eval()
    model.provenance = Provenance(
        objective="supervised", epochs=cfg.epochs, dataset_id=dataset.dataset_id,
        seed=cfg.seed, train_accuracy=accuracy, aligned=True,
    )
    return model


def pretrain_contrastive(dataset, spec: NetworkSpec, cfg: PretrainConfig,
                         policy: AugmentationPolicy | None = None) -> TrainedBackbone:
    """Train the backbone with in-batch InfoNCE on two views; labels are never read.

    The projection head used for the loss is discarded; the classifier head
    keeps its fresh initialization and stays unaligned.
    """
    cfg.validate()
    if cfg.objective != "contrastive":
        raise ConfigurationError("config objective must be 'contrastive'")
    policy = policy or AugmentationPolicy()
    # Strip down to an image-only view: the training loop below cannot read
    # labels because the object it iterates has none.
    images = dataset.without_labels() if isinstance(dataset, ImageDataset) else dataset
    _check_spec_matches(images, spec)

    model = build_network(spec, cfg.seed)
    with seeded_torch(cfg.seed + 1):
        projector = nn.Sequential(
            nn.Linear(model.feature_dim, model.feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(model.feature_dim, 64),
        )
    x01 = uint8_to_float(images.images)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    params = list(model.backbone.parameters()) + list(projector.parameters())
    optimizer = torch.optim.SGD(params, lr=cfg.learning_rate,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    model.train()
    projector.train()
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        for idx in perm.split(cfg.batch_size):
            if len(idx) < 2:
                continue
            set_lr(optimizer, cosine_lr(cfg.learning_rate, step, total_steps))
            v1, v2 = policy.two_views(x01[idx], g)
            z1 = projector(model.features(normalize_images(v1, images.mean, images.std)))
            z2 = projector(model.features(normalize_images(v2, images.mean, images.std)))
            loss = info_nce_loss(z1, z2, cfg.temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    model.eval()
    model.provenance = Provenance(
        objective="contrastive", epochs=cfg.epochs,
        dataset_id=getattr(dataset, "dataset_id", ""), seed=cfg.seed, aligned=False,
    )
    return model


def linear_probe(backbone: TrainedBackbone, dataset: ImageDataset,
                 cfg: ProbeConfig | None = None) -> TrainedBackbone:
    """Fit a fresh linear head on frozen features; backbone stays bitwise intact.

    Features are extracted once in inference mode (BN uses running stats), so
    no probe step can touch backbone parameters or statistics. The returned
    model is a copy with the new head and ``aligned=True``.
    """
    cfg = cfg or ProbeConfig()
    if not dataset.labeled:
        raise DataError("linear probing needs labels")
    if dataset.num_classes != backbone.spec.num_classes:
        raise DataError(
            f"dataset has {dataset.num_classes} classes, model head expects "
            f"{backbone.spec.num_classes}"
        )
    model = backbone.clone()
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model.eval()
    with torch.no_grad():
        feats = []
        x_all = dataset.to_tensor()
        for start in range(0, len(dataset), 256):
            feats.append(model.features(x_all[start : start + 256]))
        feats = torch.cat(feats)
    y_all = dataset.label_tensor()

    with seeded_torch(cfg.seed + 7):
        head = nn.Linear(model.feature_dim, model.spec.num_classes)
        nn.init.normal_(head.weight, std=0.01)
        nn.init.zeros_(head.bias)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.SGD(head.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        for idx in perm.split(cfg.batch_size):
            set_lr(optimizer, cosine_lr(cfg.learning_rate, step, total_steps))
            loss = F.cross_entropy(head(feats[idx]), y_all[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    with torch.no_grad():
        accuracy = float((head(feats).argmax(dim=1) == y_all).float().mean())
    model.head = head
    model.provenance.probe_accuracy = accuracy
    model.provenance.aligned = True
    return model
