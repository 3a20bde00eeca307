"""Small convolutional backbones with observable BatchNorm statistics.

Two desk-scale architectures are provided: a residual net (``tiny_resnet``)
and a plain conv stack (``tiny_convnet``). Every model exposes its BN layers
in a fixed topological order so that the stored running statistics and the
statistics of any forward batch can be compared layer by layer.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ConfigurationError,
    PreconditionError,
    ShapeError,
    StateError,
    UnsupportedModelError,
)
from .utils import seeded_torch, state_dict_fingerprint

ARCHITECTURES = ("tiny_resnet", "tiny_convnet")
CKPT_FORMAT = "scdd-ckpt-v1"


@dataclass(frozen=True)
class NetworkSpec:
    architecture_id: str
    depth: int = 8
    width_multiplier: float = 1.0
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def validate(self) -> None:
        if self.architecture_id not in ARCHITECTURES:
            raise ConfigurationError(f"unsupported architecture {self.architecture_id!r}")
        if self.depth < 1:
            raise ConfigurationError("depth must be positive")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        c, h, w = self.input_shape
        if c not in (1, 3):
            raise ConfigurationError("input channels must be 1 or 3")
        if h < 8 or w < 8:
            raise ConfigurationError("input spatial size must be at least 8x8")


@dataclass
class Provenance:
    """How a backbone was trained; populated by the squeeze stage."""

    objective: str = "untrained"  # untrained | supervised | contrastive
    epochs: int = 0
    dataset_id: str = ""
    seed: int = 0
    train_accuracy: float | None = None
    probe_accuracy: float | None = None
    aligned: bool = False

    def complete(self) -> bool:
        return self.objective in ("supervised", "contrastive") and self.epochs >= 1


@dataclass(frozen=True)
class BNLayerStats:
    layer_index: int
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class BNStatSnapshot:
    """Per-layer channel-wise running mean/variance, frozen at capture time."""

    layers: tuple[BNLayerStats, ...]

    def __post_init__(self):
        previous = -1
        for layer in self.layers:
            if layer.layer_index <= previous:
                raise ShapeError("layer indices must be strictly increasing")
            previous = layer.layer_index
            if layer.mean.shape != layer.variance.shape:
                raise ShapeError("mean and variance vectors must have equal length")
            if np.any(layer.variance < 0):
                raise ShapeError("variances must be nonnegative")

    def __len__(self) -> int:
        return len(self.layers)

    def compatible_with(self, other: "BNStatSnapshot") -> bool:
        return len(self) == len(other) and all(
            a.mean.shape == b.mean.shape for a, b in zip(self.layers, other.layers)
        )


@dataclass
class BatchLayerStats:
    layer_index: int
    mean: torch.Tensor  # (C,), kept on the autograd graph
    variance: torch.Tensor  # (C,), population variance


@dataclass
class BatchStatRecord:
    layers: list[BatchLayerStats]

    def __len__(self) -> int:
        return len(self.layers)


class _ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + identity)


def _width(base: int, multiplier: float) -> int:
    return max(4, int(round(base * multiplier)))


def _build_tiny_resnet(spec: NetworkSpec) -> tuple[nn.Module, int]:
    blocks = (spec.depth - 2) // 2
    if blocks < 1:
        raise ConfigurationError(
            f"tiny_resnet depth {spec.depth} yields no residual block (need depth >= 4)"
        )
    per_stage = [blocks // 3 + (1 if i < blocks % 3 else 0) for i in range(3)]
    widths = [_width(base, spec.width_multiplier) for base in (16, 32, 64)]
    cin = widths[0]
    layers: list[nn.Module] = [
        nn.Conv2d(spec.input_shape[0], cin, 3, 1, 1, bias=False),
        nn.BatchNorm2d(cin),
        nn.ReLU(inplace=True),
    ]
    feat = cin
    for stage, (n, cout) in enumerate(zip(per_stage, widths)):
        stride = 1 if stage == 0 else 2
        for b in range(n):
            layers.append(_ResidualBlock(cin, cout, stride if b == 0 else 1))
            cin = cout
            feat = cout
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), feat


def _build_tiny_convnet(spec: NetworkSpec) -> tuple[nn.Module, int]:
    widths = [
        _width((16, 32, 64)[min(i, 2)], spec.width_multiplier) for i in range(spec.depth)
    ]
    layers: list[nn.Module] = []
    cin = spec.input_shape[0]
    spatial = min(spec.input_shape[1], spec.input_shape[2])
    for i, cout in enumerate(widths):
        layers += [
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        ]
        if i < 2 and spatial >= 8:
            layers.append(nn.MaxPool2d(2))
            spatial //= 2
        cin = cout
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), widths[-1]


class TrainedBackbone(nn.Module):
    """Backbone + linear head + provenance; the unit every stage passes around."""

    def __init__(self, spec: NetworkSpec, backbone: nn.Module, head: nn.Linear,
                 provenance: Provenance):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.head = head
        self.provenance = provenance

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    def bn_layers(self) -> list[nn.modules.batchnorm._BatchNorm]:
        return [m for m in self.backbone.modules()
                if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def require_aligned(self) -> None:
        if not self.provenance.aligned:
            raise StateError(
                "model head is not aligned; run supervised pretraining or a linear probe first"
            )

    def clone(self) -> "TrainedBackbone":
        return copy.deepcopy(self)


def build_network(spec: NetworkSpec, seed: int) -> TrainedBackbone:
    """Deterministically initialize a backbone+head for the given spec."""
    spec.validate()
    builder = {"tiny_resnet": _build_tiny_resnet, "tiny_convnet": _build_tiny_convnet}
    with seeded_torch(seed):
        backbone, feat = builder[spec.architecture_id](spec)
        head = nn.Linear(feat, spec.num_classes)
        nn.init.normal_(head.weight, std=0.01)
        nn.init.zeros_(head.bias)
    model = TrainedBackbone(spec, backbone, head, Provenance(seed=seed))
    if len(model.bn_layers()) < 2:
        raise ConfigurationError(
            f"{spec.architecture_id} depth {spec.depth} yields fewer than 2 BN layers"
        )
    return model


def extract_bn_statistics(model: TrainedBackbone) -> BNStatSnapshot:
    """Copy out the running mean/variance of every BN layer, in network order."""
    bns = model.bn_layers()
    if not bns:
        raise UnsupportedModelError("model has no BatchNorm layers")
    layers = []
    for k, bn in enumerate(bns):
        mean = bn.running_mean.detach().cpu().numpy().copy()
        var = bn.running_var.detach().cpu().numpy().copy()
        mean.flags.writeable = False
        var.flags.writeable = False
        layers.append(BNLayerStats(k, mean, var))
    return BNStatSnapshot(tuple(layers))


def forward_with_batch_stats(
    model: TrainedBackbone, batch: torch.Tensor
) -> tuple[torch.Tensor, BatchStatRecord]:
    """Forward a batch in inference mode while observing per-BN batch statistics.

    Statistics are the channel-wise mean and population variance of each BN
    layer's input activations; they stay on the autograd graph so losses over
    them can drive gradients back into the batch. The model's parameters and
    running statistics are left untouched.
    """
    if batch.dim() != 4 or tuple(batch.shape[1:]) != tuple(model.spec.input_shape):
        raise ShapeError(
            f"batch shape {tuple(batch.shape)} does not match input shape "
            f"{model.spec.input_shape}"
        )
    if batch.shape[0] < 2:
        raise PreconditionError("need a batch of at least 2 images (variance undefined)")

    records: list[BatchLayerStats] = []
    hooks = []

    def make_hook(index: int):
        def hook(module, inputs, output):
            x = inputs[0]
            dims = (0, 2, 3) if x.dim() == 4 else (0,)
            records.append(
                BatchLayerStats(index, x.mean(dim=dims), x.var(dim=dims, unbiased=False))
            )
        return hook

    for k, bn in enumerate(model.bn_layers()):
        hooks.append(bn.register_forward_hook(make_hook(k)))
    was_training = model.training
    model.eval()
    try:
        logits = model(batch)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    records.sort(key=lambda r: r.layer_index)
    return logits, BatchStatRecord(records)


def backbone_fingerprint(model: TrainedBackbone) -> str:
    """Hash of backbone weights and BN running statistics (head excluded)."""
    return state_dict_fingerprint(model.backbone.state_dict())


def model_fingerprint(model: TrainedBackbone) -> str:
    return state_dict_fingerprint(model.state_dict())


def save_checkpoint(model: TrainedBackbone, path) -> None:
    snapshot = extract_bn_statistics(model)
    payload = {
        "format": CKPT_FORMAT,
        "spec": asdict(model.spec),
        "provenance": asdict(model.provenance),
        "backbone_state": model.backbone.state_dict(),
        "head_state": model.head.state_dict(),
        "bn_snapshot": {
            "layer_index": [l.layer_index for l in snapshot.layers],
            "mean": [torch.from_numpy(l.mean.copy()) for l in snapshot.layers],
            "variance": [torch.from_numpy(l.variance.copy()) for l in snapshot.layers],
        },
    }
    torch.save(payload, path)


def load_checkpoint(path) -> TrainedBackbone:
    payload = torch.load(path, weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    spec_dict = dict(payload["spec"])
    spec_dict["input_shape"] = tuple(spec_dict["input_shape"])
    spec = NetworkSpec(**spec_dict)
    provenance = Provenance(**payload["provenance"])
    model = build_network(spec, provenance.seed)
    model.backbone.load_state_dict(payload["backbone_state"])
    model.head.load_state_dict(payload["head_state"])
    model.provenance = provenance
    return model


def checkpoint_snapshot(path) -> BNStatSnapshot:
    """Read only the stored BN snapshot from a checkpoint file."""
    payload = torch.load(path, weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    raw = payload["bn_snapshot"]
    layers = []
    for k, mean, var in zip(raw["layer_index"], raw["mean"], raw["variance"]):
        m = mean.numpy().copy()
        v = var.numpy().copy()
        m.flags.writeable = False
        v.flags.writeable = False
        layers.append(BNLayerStats(int(k), m, v))
    return BNStatSnapshot(tuple(layers))
