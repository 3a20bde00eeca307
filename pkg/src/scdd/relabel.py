"""Crop-level soft labels for distilled images, and the packed dataset format.

Every distilled image gets ``n`` random-resized-crop regions whose geometry
is stored, so that post-training replays exactly the crops the teacher
labeled. Labels are the teacher's softmax on each crop, computed from the
quantized (exported) pixels so a reload reproduces them bit for bit.

On-disk layout::

    dataset/manifest.json                     format, teacher, config, checksums
    dataset/images/class_<c>/img_<i>.png      lossless uint8 images
    dataset/labels/labels.bin                 length-prefixed float32 LE vectors
    dataset/crops.csv                         image_id, crop_index, x, y, w, h, flip
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import denormalize_images, float_to_uint8, normalize_images
from .errors import ConfigurationError, FormatError, ShapeError
from .netcore import TrainedBackbone
from .recover import RecoveryConfig, SyntheticBatch
from .squeeze import _sample_crop
from .utils import sha256_file

DD_FORMAT = "scdd-dd-v1"
_REQUIRED_MANIFEST = ("format", "teacher", "recovery", "n_crops", "num_classes",
                      "mean", "std", "channels")


@dataclass
class RRCParams:
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropRecord:
    image_id: str
    crop_index: int
    x: int  # left
    y: int  # top
    w: int
    h: int
    flip: bool


def generate_crops(image: np.ndarray, n: int, rrc: RRCParams, seed: int,
                   image_id: str = "") -> list[CropRecord]:
    """n deterministic random-resized-crop regions for one image.

    Regions are clamped to the image bounds, so an over-scaled sample can
    never leave the frame.
    """
    if n < 1:
        raise ConfigurationError("need at least one crop per image")
    h, w = image.shape[:2]
    g = torch.Generator().manual_seed(seed)
    records = []
    for i in range(n):
        top, left, ch, cw = _sample_crop(h, w, rrc.scale, rrc.ratio, g)
        top = max(0, min(top, h - 1))
        left = max(0, min(left, w - 1))
        ch = max(1, min(ch, h - top))
        cw = max(1, min(cw, w - left))
        flip = bool(torch.rand(1, generator=g).item() < 0.5)
        records.append(CropRecord(image_id, i, left, top, cw, ch, flip))
    return records


def extract_crop(image: np.ndarray, crop: CropRecord, out_hw: tuple[int, int]) -> torch.Tensor:
    """Crop, resize to out_hw (bilinear), flip if recorded; returns [0,1] CHW."""
    patch = image[crop.y : crop.y + crop.h, crop.x : crop.x + crop.w]
    t = torch.from_numpy(np.ascontiguousarray(patch)).to(torch.float32) / 255.0
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)[0]
    if crop.flip:
        t = torch.flip(t, dims=[-1])
    return t


def soft_labels(teacher: TrainedBackbone, image: np.ndarray, crops: list[CropRecord],
                mean=None, std=None, temperature: float = 1.0) -> np.ndarray:
    """Teacher softmax on each stored crop; rows sum to 1.

    The teacher runs in inference mode (running BN statistics), so labels are
    deterministic and independent of how crops are batched.
    """
    teacher.require_aligned()
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    c, h, w = teacher.spec.input_shape
    mean = mean if mean is not None else (0.5,) * c
    std = std if std is not None else (0.25,) * c
    batch = torch.stack([extract_crop(image, crop, (h, w)) for crop in crops])
    batch = normalize_images(batch, mean, std)
    was_training = teacher.training
    teacher.eval()
    with torch.no_grad():
        logits = teacher(batch)
    teacher.train(was_training)
    return torch.softmax(logits / temperature, dim=1).numpy().astype(np.float32)


@dataclass
class DistilledDataset:
    """Distilled images plus per-crop soft labels and their manifest."""

    images: np.ndarray  # uint8 (N, H, W, C)
    image_classes: np.ndarray  # (N,)
    image_ids: list[str]
    crops: list[CropRecord]  # grouped by image, n_crops each
    soft_labels: np.ndarray  # (N * n_crops, num_classes) float32
    manifest: dict = field(default_factory=dict)

    def validate(self) -> None:
        for key in _REQUIRED_MANIFEST:
            if key not in self.manifest:
                raise FormatError(f"manifest lacks required field {key!r}")
        teacher = self.manifest["teacher"]
        for key in ("objective", "epochs", "dataset_id", "seed"):
            if key not in teacher:
                raise FormatError(f"manifest teacher provenance lacks {key!r}")
        n_crops = int(self.manifest["n_crops"])
        if len(self.crops) != len(self.images) * n_crops:
            raise FormatError(
                f"expected {len(self.images) * n_crops} crops, found {len(self.crops)}"
            )
        if self.soft_labels.shape != (len(self.crops), int(self.manifest["num_classes"])):
            raise FormatError("soft label array shape does not match crops/classes")
        if np.any(self.soft_labels < 0):
            raise FormatError("soft labels must be nonnegative")
        sums = self.soft_labels.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            worst = float(np.abs(sums - 1.0).max())
            raise FormatError(f"soft labels must sum to 1 +- 1e-5 (worst deviation {worst:.2g})")
        h, w = self.images.shape[1:3]
        for crop in self.crops:
            if crop.x < 0 or crop.y < 0 or crop.x + crop.w > w or crop.y + crop.h > h:
                raise FormatError(f"crop {crop} exceeds image bounds {h}x{w}")

    @property
    def n_crops(self) -> int:
        return int(self.manifest["n_crops"])

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])


def build_distilled(
    teacher: TrainedBackbone,
    synthetic: SyntheticBatch,
    recovery_config: RecoveryConfig | None = None,
    n_crops: int = 4,
    rrc: RRCParams | None = None,
    seed: int = 0,
    mean=None,
    std=None,
    temperature: float = 1.0,
) -> DistilledDataset:
    """Quantize synthetic images to pixels, crop them, and label the crops.

    Labels are computed from the quantized images, not the float originals,
    so stored labels replay exactly from the packed files.
    """
    rrc = rrc or RRCParams()
    c = synthetic.images.shape[1]
    mean = mean if mean is not None else (0.5,) * c
    std = std if std is not None else (0.25,) * c
    pixels = float_to_uint8(denormalize_images(synthetic.images, mean, std))
    counters: dict[int, int] = {}
    ids, crops, labels = [], [], []
    for i in range(len(pixels)):
        cls = int(synthetic.labels[i])
        j = counters.get(cls, 0)
        counters[cls] = j + 1
        image_id = f"class_{cls}/img_{j:05d}"
        ids.append(image_id)
        image_crops = generate_crops(pixels[i], n_crops, rrc, seed=seed + i * 9973,
                                     image_id=image_id)
        crops.extend(image_crops)
        labels.append(soft_labels(teacher, pixels[i], image_crops, mean, std, temperature))
    manifest = {
        "format": DD_FORMAT,
        "teacher": asdict(teacher.provenance),
        "recovery": asdict(recovery_config) if recovery_config else {},
        "n_crops": n_crops,
        "num_classes": teacher.spec.num_classes,
        "mean": list(mean),
        "std": list(std),
        "channels": c,
        "label_temperature": temperature,
        "crop_seed": seed,
        "rrc": asdict(rrc),
    }
    dataset = DistilledDataset(
        images=pixels,
        image_classes=synthetic.labels.numpy().astype(np.int64),
        image_ids=ids,
        crops=crops,
        soft_labels=np.concatenate(labels).astype(np.float32),
        manifest=manifest,
    )
    dataset.validate()
    return dataset


def replay_labels(teacher: TrainedBackbone, dataset: DistilledDataset) -> np.ndarray:
    """Recompute soft labels from stored images and crop records."""
    mean = tuple(dataset.manifest["mean"])
    std = tuple(dataset.manifest["std"])
    temperature = float(dataset.manifest.get("label_temperature", 1.0))
    n = dataset.n_crops
    out = []
    for i in range(len(dataset.images)):
        image_crops = dataset.crops[i * n : (i + 1) * n]
        out.append(soft_labels(teacher, dataset.images[i], image_crops, mean, std,
                               temperature))
    return np.concatenate(out)


def _write_labels_bin(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        for row in labels:
            f.write(struct.pack("<I", len(row)))
            f.write(row.astype("<f4").tobytes())


def _read_labels_bin(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    rows = []
    offset = 0
    width = None
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise FormatError("labels.bin: truncated length prefix")
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if width is None:
            width = n
        elif n != width:
            raise FormatError(f"labels.bin: inconsistent vector length {n} != {width}")
        end = offset + 4 * n
        if end > len(raw):
            raise FormatError("labels.bin: truncated vector payload")
        rows.append(np.frombuffer(raw, dtype="<f4", count=n, offset=offset))
        offset = end
    if not rows:
        raise FormatError("labels.bin: empty")
    return np.stack(rows)


def pack_distilled(dataset: DistilledDataset, out_dir) -> Path:
    """Write the dataset to disk with per-file checksums in the manifest."""
    dataset.validate()
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    image_files = {}
    for image_id, img in zip(dataset.image_ids, dataset.images):
        rel = Path("images") / f"{image_id}.png"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        arr = img[..., 0] if img.shape[-1] == 1 else img
        Image.fromarray(arr).save(out / rel)
        image_files[image_id] = str(rel)

    _write_labels_bin(out / "labels" / "labels.bin", dataset.soft_labels)
    with open(out / "crops.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "crop_index", "x", "y", "w", "h", "flip"])
        for crop in dataset.crops:
            writer.writerow([crop.image_id, crop.crop_index, crop.x, crop.y,
                             crop.w, crop.h, int(crop.flip)])

    manifest = dict(dataset.manifest)
    manifest["images"] = [
        {"id": image_id, "file": image_files[image_id], "class": int(cls)}
        for image_id, cls in zip(dataset.image_ids, dataset.image_classes)
    ]
    checksums = {"labels/labels.bin": sha256_file(out / "labels" / "labels.bin"),
                 "crops.csv": sha256_file(out / "crops.csv")}
    for rel in image_files.values():
        checksums[rel] = sha256_file(out / rel)
    manifest["checksums"] = checksums
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_distilled(path) -> DistilledDataset:
    """Load and verify a packed dataset; FormatError names what is wrong."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format") != DD_FORMAT:
        raise FormatError(f"manifest field 'format' is {manifest.get('format')!r}, "
                          f"expected {DD_FORMAT!r}")
    for key in _REQUIRED_MANIFEST + ("images", "checksums"):
        if key not in manifest:
            raise FormatError(f"manifest lacks required field {key!r}")

    for rel, expected in manifest["checksums"].items():
        target = root / rel
        if not target.exists():
            raise FormatError(f"checksum target missing: {rel}")
        actual = sha256_file(target)
        if actual != expected:
            raise FormatError(f"checksum mismatch for {rel}")

    channels = int(manifest["channels"])
    images, ids, classes = [], [], []
    for entry in manifest["images"]:
        arr = np.asarray(Image.open(root / entry["file"]))
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.shape[-1] != channels:
            raise FormatError(f"image {entry['id']} has {arr.shape[-1]} channels, "
                              f"manifest says {channels}")
        images.append(arr.astype(np.uint8))
        ids.append(entry["id"])
        classes.append(int(entry["class"]))

    crops = []
    with open(root / "crops.csv", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            crops.append(CropRecord(
                image_id=row["image_id"], crop_index=int(row["crop_index"]),
                x=int(row["x"]), y=int(row["y"]), w=int(row["w"]), h=int(row["h"]),
                flip=bool(int(row["flip"])),
            ))
    labels = _read_labels_bin(root / "labels" / "labels.bin")
    dataset = DistilledDataset(
        images=np.stack(images),
        image_classes=np.array(classes, dtype=np.int64),
        image_ids=ids,
        crops=crops,
        soft_labels=labels.astype(np.float32),
        manifest=manifest,
    )
    dataset.validate()
    return dataset
