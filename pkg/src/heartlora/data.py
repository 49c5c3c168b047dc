"""Deterministic synthetic image-classification tasks and the HLDS raw format.

Each class owns a fixed motif image; a sample is its class motif plus
Gaussian pixel noise, quantized to u8. Four motif families exist:

* ``stripes``   - oriented grating, angle ``c * pi / K``
* ``frequency`` - concentric rings whose radial frequency grows with the class
* ``checker``   - checkerboards of class-dependent cell size and phase
* ``blobs``     - ``c + 1`` Gaussian blobs at deterministic positions (a count task)

The families loosely echo natural texture (stripes), specialized spectra
(frequency) and structured counting/layout (checker, blobs). This is an
analogy for analysis, not a reproduction of any benchmark.

HLDS file layout (little-endian)::

    magic "HLDS" | version u16 | count u32 | height u16 | width u16 |
    channels u8 | label_width u8 (1 or 2) |
    images u8[count * channels * height * width]  (count, channels, H, W) order |
    labels u{8,16}[count]
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

FAMILIES = ("stripes", "frequency", "checker", "blobs")
SPLITS = ("train", "val", "test")
PRETRAIN_FAMILY = "blobs"
ADAPT_FAMILY = "stripes"

MAGIC = b"HLDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHBB")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class SyntheticTaskSpec:
    family: str = ADAPT_FAMILY
    num_classes: int = 10
    train_size: int = 400
    val_size: int = 200
    test_size: int = 1000
    image_size: int = 32
    channels: int = 3
    noise_std: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown motif family {self.family!r}; choose from {FAMILIES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RawDataset:
    images: np.ndarray  # u8 (count, channels, H, W)
    labels: np.ndarray  # u8 or u16 (count,)
    meta: Optional[dict] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (count, channels, H, W), got {self.images.shape}")
        if self.labels.dtype not in (np.uint8, np.uint16):
            dt = np.uint8 if (self.labels.size == 0 or self.labels.max() < 256) else np.uint16
            self.labels = self.labels.astype(dt)
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("label count does not match image count")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def height(self) -> int:
        return int(self.images.shape[2])

    @property
    def width(self) -> int:
        return int(self.images.shape[3])

    def normalized(self, dtype=np.float32) -> np.ndarray:
        """Pixels as floats in [0, 1]. The only place normalization happens."""
        return self.images.astype(dtype) / dtype(255.0)

    def int_labels(self) -> np.ndarray:
        return self.labels.astype(np.int64)

    def equals(self, other: "RawDataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and self.labels.dtype == other.labels.dtype
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


# --- motifs ---------------------------------------------------------------


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _channel_gains(channels: int, c: int, k: int) -> np.ndarray:
    phase = 2 * np.pi * c / k
    return np.array([0.75 + 0.25 * np.cos(phase + 2 * np.pi * ch / 3) for ch in range(channels)])


def motif(family: str, c: int, num_classes: int, size: int, channels: int) -> np.ndarray:
    """Class motif in [0, 1] with shape (channels, size, size)."""
    y, x = _grid(size)
    if family == "stripes":
        theta = c * np.pi / num_classes
        base = np.cos(2 * np.pi * 4.0 * (x * np.cos(theta) + y * np.sin(theta)))
    elif family == "frequency":
        r = np.sqrt(x * x + y * y)
        base = np.cos(2 * np.pi * (1.5 + 1.0 * c) * r)
    elif family == "checker":
        cell = 2 + (c % max(1, num_classes // 2))
        shift = c // max(1, num_classes // 2)
        iy = np.floor((y + 0.5) * size / cell + 0.5 * shift).astype(int)
        ix = np.floor((x + 0.5) * size / cell).astype(int)
        base = np.where((ix + iy) % 2 == 0, 1.0, -1.0)
    elif family == "blobs":
        rng = np.random.default_rng([0xB10B, c, num_classes])
        centers = rng.uniform(-0.35, 0.35, size=(c + 1, 2))
        base = np.zeros_like(x)
        for cy, cx in centers:
            base += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * 0.06**2))
        base = 2.0 * np.clip(base, 0.0, 1.0) - 1.0
    else:
        raise ValueError(f"unknown motif family {family!r}")
    gains = _channel_gains(channels, c, num_classes)
    img = 0.5 + 0.4 * base[None, :, :] * gains[:, None, None]
    return img


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def generate_split(spec: SyntheticTaskSpec, split: str) -> RawDataset:
    n = spec.size(split)
    k = spec.num_classes
    motifs = np.stack([motif(spec.family, c, k, spec.image_size, spec.channels) for c in range(k)])
    labels = np.arange(n) % k
    stream = SPLITS.index(split)
    rng = np.random.default_rng([spec.seed, stream, 0xDA7A])
    labels = labels[rng.permutation(n)]
    noise = rng.normal(0.0, 1.0, size=(n, spec.channels, spec.image_size, spec.image_size))
    images = motifs[labels] + spec.noise_std * noise
    dt = np.uint8 if k <= 256 else np.uint16
    return RawDataset(_to_u8(images), labels.astype(dt), meta={"family": spec.family, "split": split})


def generate(spec: SyntheticTaskSpec) -> dict:
    """Train/val/test splits; each split draws from its own seed stream."""
    return {s: generate_split(spec, s) for s in SPLITS}


def pretrain_spec(adapt: SyntheticTaskSpec, **overrides) -> SyntheticTaskSpec:
    """A task from a motif family disjoint from the adaptation task's."""
    family = PRETRAIN_FAMILY if adapt.family != PRETRAIN_FAMILY else "checker"
    kw = dict(adapt.to_dict(), family=family, seed=adapt.seed + 7919, train_size=1000, val_size=200, test_size=200)
    kw.update(overrides)
    return SyntheticTaskSpec(**kw)


# --- HLDS I/O -------------------------------------------------------------


def save_raw(dataset: RawDataset, path) -> None:
    label_width = 1 if dataset.labels.dtype == np.uint8 else 2
    header = _HEADER.pack(
        MAGIC, VERSION, len(dataset), dataset.height, dataset.width, dataset.channels, label_width
    )
    labels = dataset.labels.astype("<u1" if label_width == 1 else "<u2")
    with open(path, "wb") as f:
        f.write(header)
        f.write(dataset.images.tobytes(order="C"))
        f.write(labels.tobytes())


def load_raw(path) -> RawDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header ({len(buf)} of {_HEADER.size} bytes)", len(buf))
    magic, version, count, h, w, ch, lw = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if lw not in (1, 2):
        raise DatasetFormatError(f"label width {lw} not in {{1, 2}}", _HEADER.size - 1)
    off = _HEADER.size
    n_img = count * ch * h * w
    if len(buf) < off + n_img:
        raise DatasetFormatError(f"truncated image payload (expected {n_img} bytes)", len(buf))
    images = np.frombuffer(buf, dtype=np.uint8, count=n_img, offset=off).reshape(count, ch, h, w).copy()
    off += n_img
    n_lab = count * lw
    if len(buf) < off + n_lab:
        raise DatasetFormatError(f"truncated label payload (expected {n_lab} bytes)", len(buf))
    if len(buf) > off + n_lab:
        raise DatasetFormatError("trailing bytes after label payload", off + n_lab)
    labels = np.frombuffer(buf, dtype="<u1" if lw == 1 else "<u2", count=count, offset=off)
    labels = labels.astype(np.uint8 if lw == 1 else np.uint16)
    return RawDataset(images, labels)
