"""Image datasets: in-memory container, folder/CIFAR loaders, procedural corpus.

The package works on small labeled image sets. Three sources are supported:

* a directory layout with one subdirectory of PNG files per class,
* the standard CIFAR binary format (3073-byte records, label + RGB planes),
* a procedurally generated corpus ("synth10") used for desk-scale runs where
  the real CIFAR files are not available. A class is a spatial pattern
  (stripes / checker / blob / gradient) at one of two frequencies; hue is
  drawn per sample and carries no class information, so classification needs
  shape while instance-level variability lives mostly in color.
"""

from __future__ import annotations

import colorsys
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, FormatError

# Pixel normalization applied before images enter a network. Fixed constants
# (not per-dataset moments) so that checkpoints, recovery and relabeling all
# agree without carrying dataset statistics around.
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class ImageDataset:
    """Labeled uint8 images, channel-last, plus the normalization they expect."""

    images: np.ndarray  # uint8 (N, H, W, C)
    labels: np.ndarray | None  # int64 (N,) or None for unlabeled data
    num_classes: int
    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD
    class_names: list[str] = field(default_factory=list)
    dataset_id: str = ""

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DataError("images must be uint8 with shape (N, H, W, C)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError("labels length does not match image count")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        n, h, w, c = self.images.shape
        return (c, h, w)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def to_tensor(self, indices=None) -> torch.Tensor:
        """Normalized float32 NCHW tensor of the selected images."""
        imgs = self.images if indices is None else self.images[indices]
        return normalize_images(uint8_to_float(imgs), self.mean, self.std)

    def label_tensor(self, indices=None) -> torch.Tensor:
        if self.labels is None:
            raise DataError("dataset carries no labels")
        labels = self.labels if indices is None else self.labels[indices]
        return torch.from_numpy(np.ascontiguousarray(labels))

    def subset(self, indices) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[indices]
        return replace(self, images=self.images[indices], labels=labels)

    def without_labels(self) -> "UnlabeledImages":
        return UnlabeledImages(self.images, self.mean, self.std)


class UnlabeledImages:
    """Image-only view of a dataset; it has no label field to read."""

    def __init__(self, images: np.ndarray, mean: tuple, std: tuple):
        self.images = images
        self.mean = mean
        self.std = std

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        n, h, w, c = self.images.shape
        return (c, h, w)

    def to_tensor(self, indices=None) -> torch.Tensor:
        imgs = self.images if indices is None else self.images[indices]
        return normalize_images(uint8_to_float(imgs), self.mean, self.std)


def uint8_to_float(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, C) -> float32 NCHW in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).to(torch.float32) / 255.0
    return t.permute(0, 3, 1, 2).contiguous()

def float_to_uint8(images01: torch.Tensor) -> np.ndarray:
    """float NCHW in [0, 1] -> uint8 (N, H, W, C), round-half-away like PIL."""
    arr = (images01.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).contiguous().numpy()


def normalize_images(images01: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=images01.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=images01.dtype).view(1, -1, 1, 1)
    return (images01 - m) / s


def denormalize_images(images: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return images * s + m


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------

_PATTERNS = ("stripes_h", "stripes_v", "checker", "blob", "diagonal")


def _class_style(c: int, num_classes: int) -> dict:
    # Class identity is purely spatial (pattern x frequency); color is drawn
    # per sample, so it separates instances but not classes.
    return {
        "pattern": _PATTERNS[c % len(_PATTERNS)],
        "frequency": 2.0 if c < len(_PATTERNS) else 4.0,
    }


def _render_sample(style: dict, hw: int, rng: np.random.Generator) -> np.ndarray:
    h = w = hw
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = style["frequency"]
    phase = rng.uniform(0, 2 * np.pi)
    pattern = style["pattern"]
    if pattern == "stripes_h":
        mask = 0.5 * (1 + np.sin(2 * np.pi * f * yy / h + phase))
    elif pattern == "stripes_v":
        mask = 0.5 * (1 + np.sin(2 * np.pi * f * xx / w + phase))
    elif pattern == "checker":
        phase2 = rng.uniform(0, 2 * np.pi)
        mask = 0.5 * (1 + np.sin(2 * np.pi * f * yy / h + phase)
                      * np.sin(2 * np.pi * f * xx / w + phase2))
    elif pattern == "blob":
        cy = h / 2 + rng.uniform(-h / 6, h / 6)
        cx = w / 2 + rng.uniform(-w / 6, w / 6)
        sigma = h / (2 * f)
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    else:  # diagonal
        mask = 0.5 * (1 + np.sin(2 * np.pi * f * (xx + yy) / (h + w) + phase))

    hue = rng.uniform(0, 1)
    saturation = rng.uniform(0.6, 1.0)
    value = rng.uniform(0.7, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue, saturation, value), dtype=np.float64)
    amplitude = rng.uniform(0.6, 1.0)
    background = rng.uniform(0.1, 0.3)
    img = background + amplitude * mask[..., None] * (color - background)
    img = img + rng.normal(0, 0.06, size=(h, w, 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic_dataset(
    num_classes: int = 10,
    per_class: int = 100,
    image_hw: int = 32,
    seed: int = 0,
    split: str = "train",
) -> ImageDataset:
    """Deterministic procedural corpus; (seed, split, class, index) keys each sample."""
    split_id = {"train": 0, "val": 1, "test": 2}.get(split)
    if split_id is None:
        raise DataError(f"unknown split {split!r}")
    images = np.empty((num_classes * per_class, image_hw, image_hw, 3), dtype=np.uint8)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        style = _class_style(c, num_classes)
        for j in range(per_class):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(split_id, c, j))
            images[i] = _render_sample(style, image_hw, np.random.Generator(np.random.PCG64(ss)))
            labels[i] = c
            i += 1
    names = [f"class_{c}" for c in range(num_classes)]
    return ImageDataset(images, labels, num_classes, class_names=names,
                        dataset_id=f"synth{num_classes}")


# ---------------------------------------------------------------------------
# Folder-of-PNGs layout
# ---------------------------------------------------------------------------

def write_imagefolder(dataset: ImageDataset, root: str | Path) -> None:
    """One subdirectory per class holding its PNG files."""
    if dataset.labels is None:
        raise DataError("cannot write an unlabeled dataset as a class folder layout")
    root = Path(root)
    counters = [0] * dataset.num_classes
    for img, label in zip(dataset.images, dataset.labels):
        cls_dir = root / f"class_{label}"
        cls_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(cls_dir / f"img_{counters[label]:05d}.png")
        counters[label] += 1


def load_imagefolder(root: str | Path, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> ImageDataset:
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, cls_dir in enumerate(class_dirs):
        files = sorted(cls_dir.glob("*.png"))
        if not files:
            raise DataError(f"class directory {cls_dir} holds no PNG files")
        for f in files:
            arr = np.asarray(Image.open(f).convert("RGB"))
            images.append(arr)
            labels.append(label)
    stacked = np.stack(images).astype(np.uint8)
    return ImageDataset(stacked, np.array(labels), len(class_dirs), mean, std,
                        class_names=[d.name for d in class_dirs],
                        dataset_id=f"folder:{root}")


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar_bin(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 style binary batch file (label byte + 3072 pixel bytes)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {_CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar_dir(root: str | Path) -> tuple[ImageDataset, ImageDataset]:
    """Load train batches (data_batch_*) and the test batch from a CIFAR directory."""
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*")) or sorted(root.glob("*.bin"))
    if not train_files:
        raise DataError(f"no CIFAR batch files under {root}")
    test_files = [p for p in train_files if "test" in p.name]
    train_files = [p for p in train_files if "test" not in p.name]
    imgs, labs = zip(*(read_cifar_bin(p) for p in train_files))
    train = ImageDataset(np.concatenate(imgs), np.concatenate(labs), 10,
                         CIFAR_MEAN, CIFAR_STD, dataset_id=f"cifar:{root}")
    if not test_files:
        test_files = [root / "test_batch.bin"] if (root / "test_batch.bin").exists() else []
    if test_files:
        imgs, labs = zip(*(read_cifar_bin(p) for p in test_files))
        val = ImageDataset(np.concatenate(imgs), np.concatenate(labs), 10,
                           CIFAR_MEAN, CIFAR_STD, dataset_id=f"cifar:{root}")
    else:
        val = train
    return train, val


# ---------------------------------------------------------------------------
# Dataset resolution for configs / CLI
# ---------------------------------------------------------------------------

_SYNTH_RE = re.compile(r"^synth(\d+)$")


def resolve_dataset(dataset_id: str, options: dict | None = None) -> tuple[ImageDataset, ImageDataset]:
    """Map a dataset id to (train, val).

    Supported ids: ``synth<K>`` (procedural, K classes), ``folder:<root>``
    (expects <root>/train and <root>/val class-folder layouts), and
    ``cifar:<root>`` (standard binary batches).
    """
    options = options or {}
    m = _SYNTH_RE.match(dataset_id)
    if m:
        k = int(m.group(1))
        common = dict(num_classes=k,
                      image_hw=int(options.get("image_hw", 32)),
                      seed=int(options.get("seed", 0)))
        train = generate_synthetic_dataset(
            per_class=int(options.get("train_per_class", 100)), split="train", **common)
        val = generate_synthetic_dataset(
            per_class=int(options.get("val_per_class", 30)), split="val", **common)
        return train, val
    if dataset_id.startswith("folder:"):
        root = Path(dataset_id.split(":", 1)[1])
        return load_imagefolder(root / "train"), load_imagefolder(root / "val")
    if dataset_id.startswith("cifar:"):
        return load_cifar_dir(dataset_id.split(":", 1)[1])
    raise DataError(f"unknown dataset id {dataset_id!r}")
