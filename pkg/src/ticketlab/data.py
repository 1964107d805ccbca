"""Desk-scale datasets.

Provides a procedural shape/texture image generator with a controllable
domain-shift knob, standard flip+crop augmentation, and a binary manifest
format for real datasets. The generator pairs source and target on the same
latent draws: at shift magnitude 0 the target is bitwise identical to the
source, and growing the magnitude moves color balance, noise level, and
texture frequency together, so the feature-space distance between the pair
rises monotonically.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


class DataFormatError(Exception):
    """Base for dataset loading errors."""


class ChecksumError(DataFormatError):
    """A blob's content hash does not match the manifest."""


class LabelOverflowError(DataFormatError):
    """A label is outside [0, classes)."""


class DataShapeError(DataFormatError):
    """A blob's size disagrees with the manifest's declared shape."""


@dataclass
class Dataset:
    """One split: images in [0, 1], integer labels, and channel stats."""

    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # N int64
    classes: int
    split: str
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Task:
    """A dataset with train/test splits, as consumed by training and pruning."""

    name: str
    classes: int
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class GeneratorConfig:
    classes: int = 10
    image_size: int = 32
    channels: int = 3
    n_train: int = 2048
    n_test: int = 512
    texture_amplitude: float = 0.2
    base_freq: float = 2.5
    name: str = "synthetic"

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("generator needs at least one class")
        if self.classes > 10:
            raise ValueError(f"generator defines 10 shape classes, got {self.classes}")
        if self.channels != 3:
            raise ValueError("generator renders 3-channel images")


@dataclass(frozen=True)
class ShiftConfig:
    """Domain-shift knob: each component's strength is its amplitude times
    the overall magnitude, so magnitude 0 is the identity."""

    magnitude: float
    color_shift: float = 0.35
    noise_sigma: float = 0.1
    texture_freq_change: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"shift magnitude must be in [0, 1], got {self.magnitude}")

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_mask(label: int, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    d2 = u * u + v * v
    if label == 0:  # disk
        return d2 <= r * r
    if label == 1:  # ring
        return (d2 <= r * r) & (d2 >= 0.30 * r * r)
    if label == 2:  # square
        return np.maximum(au, av) <= 0.8 * r
    if label == 3:  # diamond
        return au + av <= r
    if label == 4:  # plus
        return ((au <= 0.35 * r) & (av <= r)) | ((av <= 0.35 * r) & (au <= r))
    if label == 5:  # diagonal cross
        return (np.minimum(np.abs(u - v), np.abs(u + v)) <= 0.3 * r) & (np.maximum(au, av) <= 0.85 * r)
    if label == 6:  # horizontal bar
        return (av <= 0.35 * r) & (au <= r)
    if label == 7:  # vertical bar
        return (au <= 0.35 * r) & (av <= r)
    if label == 8:  # triangle
        return (v <= 0.6 * r) & (v >= 1.8 * au - 0.9 * r)
    if label == 9:  # frame
        m = np.maximum(au, av)
        return (m <= 0.9 * r) & (m >= 0.55 * r)
    raise ValueError(f"no shape defined for label {label}")


def _color_rotation(angle: float) -> np.ndarray:
    """Rotation of RGB space around the gray axis; exact identity at angle 0."""
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _render_split(cfg: GeneratorConfig, shift: ShiftConfig | None, base_seed, n: int, split: str):
    rng = np.random.default_rng(list(base_seed))
    s = 0.0 if shift is None else shift.magnitude
    size = cfg.image_size

    labels = rng.integers(0, cfg.classes, size=n)
    centers = rng.uniform(-0.22, 0.22, size=(n, 2))
    radii = rng.uniform(0.55, 0.8, size=n)
    angles = rng.uniform(0.0, math.pi, size=n)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n)
    fg = rng.uniform(0.6, 0.95, size=(n, 3))
    bg = rng.uniform(0.3, 0.5, size=(n, 3))

    freq = cfg.base_freq * (1.0 + (0.0 if shift is None else shift.texture_freq_change) * s)
    axis = np.linspace(-1.0, 1.0, size)
    vv, uu = np.meshgrid(axis, axis, indexing="ij")

    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        u = uu - centers[i, 0]
        v = vv - centers[i, 1]
        tex = np.sin(2.0 * math.pi * freq * (uu * math.cos(angles[i]) + vv * math.sin(angles[i])) + phases[i])
        base = bg[i][:, None, None] + cfg.texture_amplitude * tex[None, :, :]
        mask = _shape_mask(int(labels[i]), u, v, radii[i])[None, :, :]
        images[i] = np.where(mask, fg[i][:, None, None], base)

    if shift is not None:
        rot = _color_rotation(shift.color_shift * s * (math.pi / 3.0))
        images = np.einsum("ij,njhw->nihw", rot.astype(np.float32), images)
        shift_rng = np.random.default_rng(list(base_seed) + [shift.seed, 7919])
        noise = shift_rng.standard_normal(images.shape, dtype=np.float32)
        images = images + np.float32(shift.noise_sigma * s) * noise
    images = np.clip(images, 0.0, 1.0).astype(np.float32, copy=False)

    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return Dataset(images, labels.astype(np.int64), cfg.classes, split, mean, std)


def make_shifted_pair(base: GeneratorConfig, shift: ShiftConfig, rng) -> tuple[Task, Task]:
    """Render a (source, target) task pair sharing latent draws.

    Target equals source bitwise at shift magnitude 0 with the same seed;
    train and test splits are disjoint by construction (separate draws).
    """
    root = int(rng.integers(0, 2**31 - 1))
    src_train = _render_split(base, None, (root, 0), base.n_train, "train")
    src_test = _render_split(base, None, (root, 1), base.n_test, "test")
    tgt_train = _render_split(base, shift, (root, 0), base.n_train, "train")
    tgt_test = _render_split(base, shift, (root, 1), base.n_test, "test")
    source = Task(f"{base.name}-source", base.classes, src_train, src_test)
    target = Task(f"{base.name}-target-s{shift.magnitude:g}", base.classes, tgt_train, tgt_test)
    return source, target


def flip_images(images: np.ndarray, apply) -> np.ndarray:
    """Horizontal flip; ``apply`` is a boolean, or a per-image boolean mask."""
    out = images.copy()
    if isinstance(apply, (bool, np.bool_)):
        if apply:
            out = out[:, :, :, ::-1].copy()
        return out
    out[apply] = out[apply][:, :, :, ::-1]
    return out


def augment(images: np.ndarray, rng, enabled: bool = True, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus random crop after zero padding.

    Labels are untouched (both transforms preserve class identity); output
    shape equals input shape. Disabled: the batch passes through unchanged.
    """
    if not enabled:
        return images
    n, _, h, w = images.shape
    out = flip_images(images, rng.random(n) < 0.5)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_dataset(task: Task, dirpath) -> Path:
    """Write manifest + little-endian blobs; returns the manifest path."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split_name in ("train", "test"):
        ds: Dataset = getattr(task, split_name)
        img_raw = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
        lab_raw = np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()
        img_file = f"{split_name}_images.bin"
        lab_file = f"{split_name}_labels.bin"
        (dirpath / img_file).write_bytes(img_raw)
        (dirpath / lab_file).write_bytes(lab_raw)
        splits[split_name] = {
            "images": img_file,
            "labels": lab_file,
            "count": len(ds),
            "sha256_images": _sha256(img_raw),
            "sha256_labels": _sha256(lab_raw),
        }
    manifest = {
        "name": task.name,
        "classes": task.classes,
        "image_shape": list(task.train.images.shape[1:]),
        "dtype": "float32",
        "splits": splits,
    }
    path = dirpath / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(manifest_path) -> Task:
    """Load and validate a manifest-described dataset.

    Checksums are verified before anything else (truncation therefore shows
    up as a checksum failure), then blob sizes against the declared shape,
    then label range against the class count.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    c, h, w = manifest["image_shape"]
    classes = manifest["classes"]

    loaded = {}
    for split_name, entry in manifest["splits"].items():
        img_raw = (root / entry["images"]).read_bytes()
        lab_raw = (root / entry["labels"]).read_bytes()
        if _sha256(img_raw) != entry["sha256_images"]:
            raise ChecksumError(f"{entry['images']}: image blob checksum mismatch")
        if _sha256(lab_raw) != entry["sha256_labels"]:
            raise ChecksumError(f"{entry['labels']}: label blob checksum mismatch")
        n = entry["count"]
        if len(img_raw) != n * c * h * w * 4:
            raise DataShapeError(
                f"{entry['images']}: {len(img_raw)} bytes does not match {n} images of shape {(c, h, w)}"
            )
        if len(lab_raw) != n * 2:
            raise DataShapeError(f"{entry['labels']}: {len(lab_raw)} bytes does not match {n} labels")
        images = np.frombuffer(img_raw, dtype="<f4").reshape(n, c, h, w).astype(np.float32, copy=True)
        labels = np.frombuffer(lab_raw, dtype="<u2").astype(np.int64)
        if labels.size and labels.max() >= classes:
            raise LabelOverflowError(f"{entry['labels']}: label {labels.max()} >= class count {classes}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataFormatError(f"{entry['images']}: image values outside [0, 1]")
        mean = images.mean(axis=(0, 2, 3)) if n else np.zeros(c, dtype=np.float32)
        std = images.std(axis=(0, 2, 3)) if n else np.ones(c, dtype=np.float32)
        loaded[split_name] = Dataset(images, labels, classes, split_name, mean, std)
    return Task(manifest["name"], classes, loaded["train"], loaded["test"])
