"""Synthesize images from noise by matching a teacher's BN statistics.

The synthesis loss has two terms: cross-entropy of the teacher's prediction
against the assigned class, and a statistic-matching regularizer that pulls
the synthetic batch's per-BN-layer channel statistics toward the running
statistics stored in the teacher:

    R(x) = sum_k beta_k * ||mu_k(x) - rm_k||_2 + sum_k gamma_k * ||var_k(x) - rv_k||_2
    total = ce + alpha * R

Coefficients are imbalanced: layer 0 gets ``first_bn_multiplier`` times the
weight of the others, which sharpens the earliest (most input-coupled)
statistics. Optimization is Adam on the image pixels only; the teacher is
read-only throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DivergenceError, ShapeError, StateError
from .netcore import (
    BatchStatRecord,
    BNStatSnapshot,
    TrainedBackbone,
    backbone_fingerprint,
    extract_bn_statistics,
    forward_with_batch_stats,
)
from .squeeze import random_resized_crop
from .utils import cosine_lr, set_lr


@dataclass
class RecoveryConfig:
    ipc: int = 10
    alpha: float = 0.005
    first_bn_multiplier: float = 10.0
    beta: list[float] | None = None  # per-layer mean coefficients; None -> all ones
    gamma: list[float] | None = None  # per-layer variance coefficients
    iterations: int = 500
    batch_size: int = 100
    lr: float = 0.25
    betas: tuple[float, float] = (0.5, 0.9)
    lr_schedule: str = "cosine"
    seed: int = 0
    augment_crops: bool = False  # random-resized-crop the batch each step
    crop_scale: tuple[float, float] = (0.3, 1.0)

    def validate(self) -> None:
        if self.ipc < 1:
            raise ConfigurationError("ipc must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if self.first_bn_multiplier <= 0:
            raise ConfigurationError("first_bn_multiplier must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        for name, coeffs in (("beta", self.beta), ("gamma", self.gamma)):
            if coeffs is not None and any(c < 0 for c in coeffs):
                raise ConfigurationError(f"{name} coefficients must be nonnegative")

    def coefficients(self, num_layers: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Effective per-layer (beta, gamma) with the layer-0 multiplier applied."""
        beta = torch.ones(num_layers) if self.beta is None else torch.tensor(
            self.beta, dtype=torch.float32)
        gamma = torch.ones(num_layers) if self.gamma is None else torch.tensor(
            self.gamma, dtype=torch.float32)
        if len(beta) != num_layers or len(gamma) != num_layers:
            raise ShapeError(
                f"need {num_layers} beta/gamma coefficients, got {len(beta)}/{len(gamma)}"
            )
        beta = beta.clone()
        gamma = gamma.clone()
        beta[0] = beta[0] * self.first_bn_multiplier
        gamma[0] = gamma[0] * self.first_bn_multiplier
        return beta, gamma


@dataclass
class SyntheticBatch:
    images: torch.Tensor  # (B, C, H, W), normalized pixel space
    labels: torch.Tensor  # (B,) int64

    def validate(self, num_classes: int) -> None:
        if not torch.isfinite(self.images).all():
            raise ShapeError("synthetic images contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ShapeError("labels out of class range")


@dataclass
class TrajectoryPoint:
    iteration: int
    ce_loss: float
    bn_loss: float
    total: float


@dataclass
class BatchTrace:
    class_label: int
    points: list[TrajectoryPoint]

    @property
    def initial_bn(self) -> float:
        return self.points[0].bn_loss

    @property
    def final_bn(self) -> float:
        return self.points[-1].bn_loss


@dataclass
class LossTrajectory:
    """Per-iteration loss records, averaged over class-batches, plus raw traces."""

    points: list[TrajectoryPoint]
    per_batch: list[BatchTrace] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "ce", "bn", "total"])
            for p in self.points:
                writer.writerow([p.iteration, f"{p.ce_loss:.6g}", f"{p.bn_loss:.6g}",
                                 f"{p.total:.6g}"])


def init_synthetic(ipc: int, classes, input_shape, seed: int) -> SyntheticBatch:
    """Standard-normal images with labels grouped class by class."""
    classes = sorted(classes)
    if ipc < 1 or not classes:
        raise ConfigurationError("need ipc >= 1 and at least one class")
    c, h, w = input_shape
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(ipc * len(classes), c, h, w, generator=g)
    labels = torch.tensor([cls for cls in classes for _ in range(ipc)], dtype=torch.int64)
    return SyntheticBatch(images, labels)


def _snapshot_targets(snapshot: BNStatSnapshot) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(torch.from_numpy(s.mean.copy()), torch.from_numpy(s.variance.copy()))
            for s in snapshot.layers]


def _layer_terms(batch: BatchStatRecord, targets, beta: torch.Tensor,
                 gamma: torch.Tensor) -> torch.Tensor:
    if len(batch) != len(targets):
        raise ShapeError(f"batch has {len(batch)} BN layers, snapshot {len(targets)}")
    if len(beta) != len(targets) or len(gamma) != len(targets):
        raise ShapeError("coefficient vectors must match BN layer count")
    if (beta < 0).any() or (gamma < 0).any():
        raise ConfigurationError("coefficients must be nonnegative")
    terms = []
    for b, (rm, rv), bk, gk in zip(batch.layers, targets, beta, gamma):
        if b.mean.shape[0] != rm.shape[0]:
            raise ShapeError(
                f"layer {b.layer_index}: {b.mean.shape[0]} channels vs {rm.shape[0]}"
            )
        terms.append(
            bk.to(b.mean.dtype) * torch.linalg.vector_norm(b.mean - rm.to(b.mean.dtype))
            + gk.to(b.mean.dtype)
            * torch.linalg.vector_norm(b.variance - rv.to(b.variance.dtype))
        )
    return torch.stack(terms)


def bn_matching_loss(batch: BatchStatRecord, snapshot: BNStatSnapshot,
                     beta, gamma) -> torch.Tensor:
    """Weighted sum over layers of L2 norms of mean and variance mismatches."""
    return _layer_terms(batch, _snapshot_targets(snapshot),
                        torch.as_tensor(beta), torch.as_tensor(gamma)).sum()


def bn_matching_loss_per_layer(batch: BatchStatRecord, snapshot: BNStatSnapshot,
                               beta, gamma) -> torch.Tensor:
    """Per-layer contributions; ``bn_matching_loss`` is their sum."""
    return _layer_terms(batch, _snapshot_targets(snapshot),
                        torch.as_tensor(beta), torch.as_tensor(gamma))


def recovery_objective(
    model: TrainedBackbone,
    batch: SyntheticBatch,
    cfg: RecoveryConfig,
    snapshot: BNStatSnapshot | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Evaluate (total, ce, bn) on a synthetic batch; gradients flow to images only."""
    model.require_aligned()
    cfg.validate()
    snapshot = snapshot or extract_bn_statistics(model)
    beta, gamma = cfg.coefficients(len(snapshot))
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        logits, stats = forward_with_batch_stats(model, batch.images)
        ce = F.cross_entropy(logits, batch.labels)
        bn = _layer_terms(stats, _snapshot_targets(snapshot), beta, gamma).sum()
        total = ce + cfg.alpha * bn
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
    return total, ce, bn


def recover_dataset(model: TrainedBackbone,
                    cfg: RecoveryConfig) -> tuple[SyntheticBatch, LossTrajectory]:
    """Optimize a full synthetic set, one single-class batch at a time.

    Each class's images are optimized for ``cfg.iterations`` Adam steps with
    cosine lr decay. Returns the final images (in the init order) and the loss
    trajectory; raises DivergenceError the moment a loss goes non-finite. The
    teacher is verified unchanged before returning.
    """
    cfg.validate()
    model.require_aligned()
    if not model.provenance.complete():
        raise StateError("teacher provenance incomplete; pretrain before recovery")
    spec = model.spec
    init = init_synthetic(cfg.ipc, range(spec.num_classes), spec.input_shape, cfg.seed)
    snapshot = extract_bn_statistics(model)
    targets = _snapshot_targets(snapshot)
    beta, gamma = cfg.coefficients(len(snapshot))
    fingerprint = backbone_fingerprint(model)

    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    final = init.images.clone()
    traces: list[BatchTrace] = []
    aug_generator = torch.Generator().manual_seed(cfg.seed + 101)
    try:
        for cls in range(spec.num_classes):
            cls_idx = (init.labels == cls).nonzero(as_tuple=True)[0]
            for start in range(0, len(cls_idx), cfg.batch_size):
                idx = cls_idx[start : start + cfg.batch_size]
                x = init.images[idx].clone().requires_grad_(True)
                y = init.labels[idx]
                optimizer = torch.optim.Adam([x], lr=cfg.lr, betas=cfg.betas)
                points = []
                for it in range(cfg.iterations):
                    set_lr(optimizer, cosine_lr(cfg.lr, it, cfg.iterations))
                    x_in, y_in = x, y
                    if len(idx) == 1:
                        # duplicating a singleton leaves pooled (N,H,W) batch
                        # statistics, the CE mean, and its gradient unchanged
                        # while satisfying the batch >= 2 requirement
                        x_in, y_in = torch.cat([x, x]), torch.cat([y, y])
                    if cfg.augment_crops:
                        x_in = random_resized_crop(
                            x_in, cfg.crop_scale, (3 / 4, 4 / 3), aug_generator)
                    logits, stats = forward_with_batch_stats(model, x_in)
                    ce = F.cross_entropy(logits, y_in)
                    bn = _layer_terms(stats, targets, beta, gamma).sum()
                    total = ce + cfg.alpha * bn
                    if not torch.isfinite(total):
                        raise DivergenceError(
                            f"non-finite loss at iteration {it} (class {cls}): "
                            f"ce={ce.item()}, bn={bn.item()}",
                            iteration=it,
                        )
                    optimizer.zero_grad()
                    total.backward()
                    optimizer.step()
                    points.append(TrajectoryPoint(it, float(ce.detach()),
                                                  float(bn.detach()),
                                                  float(total.detach())))
                final[idx] = x.detach()
                traces.append(BatchTrace(cls, points))
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)

    if backbone_fingerprint(model) != fingerprint:
        raise StateError("teacher was mutated during recovery; this is a bug")

    mean_points = [
        TrajectoryPoint(
            it,
            float(np.mean([t.points[it].ce_loss for t in traces])),
            float(np.mean([t.points[it].bn_loss for t in traces])),
            float(np.mean([t.points[it].total for t in traces])),
        )
        for it in range(cfg.iterations)
    ]
    result = SyntheticBatch(final, init.labels)
    result.validate(spec.num_classes)
    return result, LossTrajectory(mean_points, traces)
