"""Dataset generation, normalization, on-disk image format, augmentation.

The synthetic task draws each class from a fixed smooth template plus
Gaussian noise, which gives a classification problem that small models can
learn in seconds but that still rewards some filters more than others.
Normalization statistics are computed from the training split only and
applied exactly once to both splits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "SyntheticSpec",
    "generate_synthetic",
    "save_binary_images",
    "load_binary_images",
    "augment_batch",
    "IMAGE_MAGIC",
]

IMAGE_MAGIC = b"OPRNIMG1"


class DataError(RuntimeError):
    """Malformed dataset, label set, or image file."""


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    classes: int
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        for name in ("train", "val"):
            images = getattr(self, f"{name}_images")
            labels = getattr(self, f"{name}_labels")
            if images.ndim != 4:
                raise DataError(f"{name} images must be [N, C, H, W], got {images.shape}")
            if labels.shape != (images.shape[0],):
                raise DataError(f"{name} labels must be one per image")
            if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
                raise DataError(f"{name} labels fall outside [0, {self.classes})")
        present = set(np.unique(self.train_labels).tolist())
        if present != set(range(self.classes)):
            raise DataError(f"training split must contain every class, found {sorted(present)}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    train_per_class: int = 96
    val_per_class: int = 48
    image_hw: int = 16
    channels: int = 3
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.train_per_class < 1 or self.val_per_class < 1:
            raise DataError("need at least one sample per class and split")
        if self.image_hw < 4 or self.image_hw % 4 != 0:
            raise DataError("image_hw must be a positive multiple of 4")
        if self.noise < 0:
            raise DataError("noise must be non-negative")


def _smooth_template(rng, channels, hw) -> np.ndarray:
    """Coarse random field upsampled to full resolution."""
    coarse = rng.normal(size=(channels, 4, 4))
    tpl = np.kron(coarse, np.ones((hw // 4, hw // 4)))
    # soften block edges with one box-blur pass
    padded = np.pad(tpl, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(tpl)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + hw, dx : dx + hw]
    return out / 9.0


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    templates = [_smooth_template(rng, spec.channels, spec.image_hw) for _ in range(spec.classes)]

    def draw(per_class):
        images, labels = [], []
        for c, tpl in enumerate(templates):
            noise = rng.normal(size=(per_class, *tpl.shape))
            images.append(tpl[None] + spec.noise * noise)
            labels.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(images).astype(np.float32)
        y = np.concatenate(labels)
        perm = rng.permutation(x.shape[0])
        return x[perm], y[perm]

    train_x, train_y = draw(spec.train_per_class)
    val_x, val_y = draw(spec.val_per_class)

    # normalize with training statistics only, exactly once
    mean = train_x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train_x.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std == 0.0, 1.0, std)
    shape = (1, spec.channels, 1, 1)
    train_x = ((train_x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
    val_x = ((val_x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)

    return Dataset(
        train_x,
        train_y,
        val_x,
        val_y,
        spec.classes,
        channel_mean=mean.astype(np.float32),
        channel_std=std.astype(np.float32),
    )


def save_binary_images(path, images: np.ndarray, labels: np.ndarray, classes: int) -> None:
    """Record layout: one u8 label then C*H*W little-endian f32 pixels."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise DataError(f"images must be [N, C, H, W], got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise DataError("labels must be one per image")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels fall outside [0, {classes})")
    if classes > 255:
        raise DataError("at most 255 classes in this file format")
    n, c, h, w = images.shape
    if h > 0xFFFF or w > 0xFFFF or c > 255:
        raise DataError("image extents too large for this file format")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(int(n).to_bytes(4, "little"))
        fh.write(int(h).to_bytes(2, "little"))
        fh.write(int(w).to_bytes(2, "little"))
        fh.write(int(c).to_bytes(1, "little"))
        fh.write(int(classes).to_bytes(1, "little"))
        for i in range(n):
            fh.write(int(labels[i]).to_bytes(1, "little"))
            fh.write(images[i].astype("<f4").tobytes())


def load_binary_images(path):
    """Returns (images, labels, classes); validates sizes and label range."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 18:
        raise DataError("image file truncated before header")
    if raw[:8] != IMAGE_MAGIC:
        raise DataError("bad magic string in image file")
    n = int.from_bytes(raw[8:12], "little")
    h = int.from_bytes(raw[12:14], "little")
    w = int.from_bytes(raw[14:16], "little")
    c = int(raw[16])
    classes = int(raw[17])
    if h < 1 or w < 1 or c < 1 or classes < 2:
        raise DataError(f"bad image header: n={n} h={h} w={w} c={c} classes={classes}")
    record = 1 + 4 * c * h * w
    expected = 18 + n * record
    if len(raw) != expected:
        raise DataError(f"image file has {len(raw)} bytes, expected {expected}")
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    off = 18
    for i in range(n):
        labels[i] = raw[off]
        if labels[i] >= classes:
            raise DataError(f"record {i}: label {labels[i]} outside [0, {classes})")
        pixels = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off + 1)
        images[i] = pixels.reshape(c, h, w)
        off += record
    return images, labels, classes


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random shift (zero padding, crop back) and horizontal flip."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
