"""TKDS image datasets and the synthetic class-template generator.

TKDS layout (little-endian)::

    magic      4s   b"TKDS"
    version    u16
    count      u32
    channels   u16
    height     u16
    width      u16
    num_classes u16
    count x (label u16, pixels u8[channels*height*width])
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng

MAGIC = b"TKDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")
HEADER_SIZE = _HEADER.size  # 18


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    pixels: np.ndarray  # uint8 [n, C, H, W]
    labels: np.ndarray  # int64 [n]
    num_classes: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise DatasetError(f"pixels must be [n, C, H, W], got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise DatasetError("label count differs from image count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def images(self, idx=slice(None), dtype=np.float32) -> np.ndarray:
        return self.pixels[idx].astype(dtype) / 255.0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], self.labels[idx], self.num_classes)

    def split(self, val_frac: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        order = make_rng(seed).permutation(len(self))
        n_val = int(round(len(self) * val_frac))
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))

    def batches(self, batch_size: int, shuffle_seed: int | None = None):
        """Yield (images, labels) in a fixed order per seed."""
        idx = np.arange(len(self))
        if shuffle_seed is not None:
            idx = make_rng(shuffle_seed).permutation(len(self))
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield self.images(sel), self.labels[sel]

    def to_bytes(self) -> bytes:
        c, h, w = self.shape
        head = _HEADER.pack(MAGIC, VERSION, len(self), c, h, w, self.num_classes)
        rec = np.zeros(len(self), dtype=[("label", "<u2"), ("pix", "u1", (c * h * w,))])
        rec["label"] = self.labels
        rec["pix"] = self.pixels.reshape(len(self), c * h * w)
        return head + rec.tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < HEADER_SIZE:
        raise DatasetError(f"file too short for a TKDS header ({len(buf)} bytes)")
    magic, version, count, c, h, w, k = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetError(f"unsupported TKDS version {version}")
    rec_size = 2 + c * h * w
    expected = HEADER_SIZE + count * rec_size
    if len(buf) != expected:
        raise DatasetError(f"file is {len(buf)} bytes, header implies {expected} (truncated or padded)")
    rec = np.frombuffer(buf, dtype=[("label", "<u2"), ("pix", "u1", (c * h * w,))], count=count, offset=HEADER_SIZE)
    labels = rec["label"].astype(np.int64)
    if count and labels.max() >= k:
        raise DatasetError(f"label {labels.max()} >= num_classes {k}")
    return Dataset(rec["pix"].reshape(count, c, h, w).copy(), labels, k)


def load(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such dataset file: {path}")
    return from_bytes(path.read_bytes())


@dataclass
class SyntheticSpec:
    """Each class owns a random per-patch template; samples add Gaussian noise."""

    grid: tuple = (8, 8)
    classes: int = 4
    sigma: float = 0.3
    seed: int = 0
    n: int = 512
    patch: int = 4
    channels: int = 1
    pattern: float = 0.15

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def parse(cls, text: str) -> "SyntheticSpec":
        """Parse ``key=value`` pairs separated by commas, e.g. ``grid=8x8,classes=4,sigma=0.3``."""
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ValueError(f"bad synth spec item {part!r}; expected key=value")
            key, val = (s.strip() for s in part.split("=", 1))
            if key == "grid":
                kw["grid"] = parse_grid(val)
            elif key in ("sigma", "pattern"):
                kw[key] = float(val)
            elif key in ("classes", "seed", "n", "patch", "channels"):
                kw[key] = int(val)
            else:
                raise ValueError(f"unknown synth spec key {key!r}")
        return cls(**kw)


def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like HxW, got {text!r}") from None
    return h, w


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Per-class patch means: an evenly spaced class level plus a random per-patch pattern."""
    rng = make_rng(spec.seed)
    h, w = spec.grid
    levels = np.linspace(0.25, 0.75, spec.classes)[:, None, None, None]
    pattern = rng.uniform(-1.0, 1.0, size=(spec.classes, spec.channels, h, w))
    return levels + spec.pattern * pattern


def synth(spec: SyntheticSpec) -> Dataset:
    """Deterministic per seed; labels cycle through the classes before shuffling."""
    templates = class_templates(spec)
    rng = make_rng(spec.seed + 0x5EED)
    labels = np.arange(spec.n) % spec.classes
    labels = labels[rng.permutation(spec.n)]
    p = spec.patch
    means = templates[labels].repeat(p, axis=2).repeat(p, axis=3)
    noise = rng.normal(0.0, spec.sigma, size=means.shape) if spec.sigma > 0 else 0.0
    pixels = np.clip(np.rint((means + noise) * 255.0), 0, 255).astype(np.uint8)
    return Dataset(pixels, labels, spec.classes)
