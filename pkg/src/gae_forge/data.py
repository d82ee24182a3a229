"""Dataset ingestion and synthesis.

IDX is the classic big-endian image container (magic 0x00000803 for images,
0x00000801 for labels); pixels land in [0, 1]. Synthetic generators produce
labeled, class-separable toy images so classification and clustering tasks
have known structure at desk scale.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .configio import ConfigError
from .tensor import Rng

__all__ = ["Dataset", "IdxParseError", "load_idx", "write_idx",
           "split_train_val", "synth_dataset", "dataset_from_spec"]

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Malformed IDX payload; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray              # [N, H, W] in [0, 1]
    labels: np.ndarray | None = None
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3:
            raise ValueError(f"images must be [N, H, W], got {self.images.shape}")
        if np.any(self.images < 0) or np.any(self.images > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.images):
                raise ValueError(
                    f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        labels = self.labels[idx] if self.labels is not None else None
        return Dataset(self.images[idx], labels,
                       split if split is not None else self.split)


def load_idx(images_path, labels_path=None) -> Dataset:
    with open(images_path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise IdxParseError("image file shorter than its header", len(buf))
    magic, n, h, w = struct.unpack_from(">IIII", buf, 0)
    if magic != _IMAGE_MAGIC:
        raise IdxParseError(
            f"bad image magic 0x{magic:08x}, expected 0x{_IMAGE_MAGIC:08x}", 0)
    expected = 16 + n * h * w
    if len(buf) != expected:
        raise IdxParseError(
            f"image payload truncated: {len(buf)} bytes, expected {expected}",
            min(len(buf), expected))
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, h, w)
    images = pixels.astype(float) / 255.0

    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            lbuf = fh.read()
        if len(lbuf) < 8:
            raise IdxParseError("label file shorter than its header", len(lbuf))
        lmagic, ln = struct.unpack_from(">II", lbuf, 0)
        if lmagic != _LABEL_MAGIC:
            raise IdxParseError(
                f"bad label magic 0x{lmagic:08x}, expected 0x{_LABEL_MAGIC:08x}", 0)
        if len(lbuf) != 8 + ln:
            raise IdxParseError(
                f"label payload truncated: {len(lbuf)} bytes, expected {8 + ln}",
                min(len(lbuf), 8 + ln))
        if ln != n:
            raise IdxParseError(f"{ln} labels for {n} images", 4)
        labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(int)
    return Dataset(images, labels)


def write_idx(dataset: Dataset, images_path, labels_path=None) -> None:
    """Inverse of load_idx; pixels are rounded to the nearest byte."""
    imgs = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = imgs.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IMAGE_MAGIC, n, h, w))
        fh.write(imgs.tobytes())
    if labels_path is not None:
        if dataset.labels is None:
            raise ValueError("dataset has no labels to write")
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", _LABEL_MAGIC, n))
            fh.write(dataset.labels.astype(np.uint8).tobytes())


def split_train_val(dataset: Dataset, val_size: int) -> tuple[Dataset, Dataset]:
    """Validation is the last ``val_size`` items in stored order, no shuffle."""
    n = len(dataset)
    if not 0 < val_size < n:
        raise ValueError(f"val_size must lie in (0, {n}), got {val_size}")
    cut = n - val_size
    return (dataset.subset(slice(0, cut), "train"),
            dataset.subset(slice(cut, n), "val"))


# -- synthetic desk-scale data --------------------------------------------------


def synth_dataset(kind: str, n: int, size: tuple[int, int], n_classes: int,
                  rng: Rng) -> Dataset:
    """Labeled toy images: per-class blobs, oriented bars, or rings."""
    if n < n_classes:
        raise ValueError("need at least one sample per class")
    h, w = size
    labels = np.arange(n) % n_classes
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((n, h, w))
    for i in range(n):
        c = labels[i]
        if kind == "blobs":
            # Class-specific center on a circle around the image middle.
            angle = 2 * np.pi * c / n_classes
            cy = h / 2 + 0.28 * h * np.sin(angle) + rng.normal(std=0.35)
            cx = w / 2 + 0.28 * w * np.cos(angle) + rng.normal(std=0.35)
            sig = 0.14 * min(h, w) * (1.0 + 0.1 * rng.normal())
            img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
        elif kind == "bars":
            angle = np.pi * c / n_classes + rng.normal(std=0.04)
            offset = rng.normal(std=0.5)
            # Signed distance to a line through the center at this angle.
            dist = ((yy - h / 2) * np.cos(angle) - (xx - w / 2) * np.sin(angle)
                    - offset)
            img = np.exp(-(dist ** 2) / (2 * 0.8 ** 2))
        elif kind == "rings":
            radius = (0.15 + 0.3 * c / max(1, n_classes - 1)) * min(h, w) \
                + rng.normal(std=0.25)
            rr = np.sqrt((yy - h / 2) ** 2 + (xx - w / 2) ** 2)
            img = np.exp(-((rr - radius) ** 2) / (2 * 0.8 ** 2))
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        img = img + rng.normal((h, w), std=0.02)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


def dataset_from_spec(spec: dict) -> Dataset:
    """Build a dataset from a JSON data spec.

    {"kind": "synthetic", "synth_kind": ..., "n": ..., "height": ...,
     "width": ..., "n_classes": ..., "seed": ...} or
    {"kind": "idx", "images": path, "labels": path?}.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("data spec needs a 'kind' key", "/kind")
    if spec["kind"] == "synthetic":
        for key in ("n", "height", "width"):
            if key not in spec:
                raise ConfigError(f"missing synthetic data key {key!r}", f"/{key}")
        return synth_dataset(spec.get("synth_kind", "blobs"), int(spec["n"]),
                             (int(spec["height"]), int(spec["width"])),
                             int(spec.get("n_classes", 2)),
                             Rng(int(spec.get("seed", 0))))
    if spec["kind"] == "idx":
        if "images" not in spec:
            raise ConfigError("missing idx data key 'images'", "/images")
        return load_idx(spec["images"], spec.get("labels"))
    raise ConfigError(f"unknown data kind {spec['kind']!r}", "/kind")
