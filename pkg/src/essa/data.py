"""Synthetic two-domain image classification data and the ESDS file format.

Every image is a class-conditioned sinusoid with per-instance jitter and
clutter.  Class ``c`` sets the orientation (horizontal stripes for even ``c``,
vertical for odd) and the frequency level ``c // 2``; both survive horizontal
flips and moderate crops, so the class stays recoverable under the SSL
augmentations.  The target domain applies blur, a gamma curve, a per-channel
colour bias and extra sensor noise, each scaled by ``shift_strength``; at
strength 0 the target rendering is byte-identical to the source.

ESDS layout (little-endian)::

    magic "ESDS" | version u16 | count u32 | channels u8 | height u16 | width u16 | label_present u8
    count x ( channels*height*width u8 pixels, C-H-W order | [u16 label] )
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from essa.errors import ConfigError, DataError, FormatError

MAGIC = b"ESDS"
VERSION = 1
HEADER = struct.Struct("<4sHIBHHB")
SPLITS = ("train", "val", "test")
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    image_size: int = 32
    channels: int = 3
    train_size: int = 512
    val_size: int = 128
    test_size: int = 256
    base_frequency: float = 1.5
    frequency_ratio: float = 2.5
    orientation_jitter: float = 0.2
    frequency_jitter: float = 0.15
    amplitude: tuple[float, float] = (0.2, 0.4)
    clutter: float = 0.1
    source_noise: float = 0.03
    target_gamma: float = 2.0
    target_bias: tuple[float, ...] = (0.2, -0.15, 0.1)
    target_noise: float = 0.08
    target_blur: float = 0.6
    shift_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "amplitude", tuple(self.amplitude))
        object.__setattr__(self, "target_bias", tuple(self.target_bias))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ConfigError(f"shift_strength must lie in [0, 1], got {self.shift_strength}")
        if len(self.target_bias) != self.channels:
            raise ConfigError(f"target_bias needs {self.channels} entries, got {len(self.target_bias)}")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ConfigError("split sizes must be non-negative")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitude"] = list(self.amplitude)
        d["target_bias"] = list(self.target_bias)
        return d

    def with_(self, **changes) -> SynthSpec:
        return replace(self, **changes)


@dataclass
class Dataset:
    pixels: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def images(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("labels required")
        return self.labels


# ---------------------------------------------------------------------------
# generation


def _lerp(a: float, b: float, t: float) -> float:
    return a + t * (b - a)


def _render(spec: SynthSpec, rng: np.random.Generator, label: int, strength: float) -> np.ndarray:
    n = spec.image_size
    theta = 0.5 * math.pi * (label % 2) + rng.normal(0.0, spec.orientation_jitter)
    freq = spec.base_frequency * spec.frequency_ratio ** (label // 2) * (
        1.0 + rng.uniform(-spec.frequency_jitter, spec.frequency_jitter)
    )
    phase = rng.uniform(0.0, 2.0 * math.pi)
    amp = rng.uniform(*spec.amplitude)
    tint = rng.uniform(0.9, 1.0, spec.channels)
    blob_center = rng.uniform(0.0, 1.0, 2)
    blob_width = rng.uniform(0.15, 0.35)
    blob_color = rng.uniform(-1.0, 1.0, spec.channels)
    background = rng.uniform(0.35, 0.65)
    grain = rng.standard_normal((spec.channels, n, n))

    yy, xx = np.meshgrid((np.arange(n) + 0.5) / n, (np.arange(n) + 0.5) / n, indexing="ij")
    wave = np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    blob = np.exp(-((xx - blob_center[0]) ** 2 + (yy - blob_center[1]) ** 2) / (2 * blob_width**2))
    img = (
        background
        + amp * wave[None] * tint[:, None, None]
        + spec.clutter * blob[None] * blob_color[:, None, None]
    )

    blur = strength * spec.target_blur
    if blur > 0:
        img = np.stack([gaussian_filter(ch, blur, mode="reflect") for ch in img])
    img = np.clip(img, 0.0, 1.0)
    img = img ** _lerp(1.0, spec.target_gamma, strength)
    img = img + strength * np.asarray(spec.target_bias)[:, None, None]
    img = img + _lerp(spec.source_noise, spec.target_noise, strength) * grain
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate(spec: SynthSpec, split: str, domain: str) -> Dataset:
    """Deterministic per (seed, split, domain, index)."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain {domain!r}")
    strength = 0.0 if domain == "source" else spec.shift_strength
    count = spec.split_size(split)
    split_id = SPLITS.index(split)
    pixels = np.zeros((count, spec.channels, spec.image_size, spec.image_size), dtype=np.uint8)
    labels = np.arange(count) % spec.num_classes
    for i in range(count):
        rng = np.random.default_rng([spec.seed, split_id, i])
        pixels[i] = _render(spec, rng, int(labels[i]), strength)
    return Dataset(pixels, labels.astype(np.int64), {"split": split, "domain": domain})


def dataset_path(directory, name: str, split: str, domain: str) -> Path:
    return Path(directory) / f"{name}.{split}.{domain}.esds"


def write_all(spec: SynthSpec, directory, name: str = "synth") -> dict[tuple[str, str], Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for split in SPLITS:
        for domain in DOMAINS:
            path = dataset_path(directory, name, split, domain)
            save(generate(spec, split, domain), path)
            out[(split, domain)] = path
    return out


# ---------------------------------------------------------------------------
# serialisation


def expected_size(count: int, channels: int, height: int, width: int, labeled: bool) -> int:
    return HEADER.size + count * (channels * height * width + 2 * int(labeled))


def to_bytes(ds: Dataset) -> bytes:
    pixels = np.ascontiguousarray(ds.pixels, dtype=np.uint8)
    count, c, h, w = pixels.shape
    labeled = ds.labels is not None
    header = HEADER.pack(MAGIC, VERSION, count, c, h, w, int(labeled))
    flat = pixels.reshape(count, -1)
    if not labeled:
        return header + flat.tobytes()
    labels = np.asarray(ds.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise DataError("labels must fit in u16")
    record = np.dtype([("px", np.uint8, c * h * w), ("label", "<u2")])
    rows = np.empty(count, dtype=record)
    rows["px"] = flat
    rows["label"] = labels
    return header + rows.tobytes()


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise FormatError(f"length: file has {len(buf)} bytes, header alone needs {HEADER.size}")
    magic, version, count, c, h, w, labeled = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r} at offset 0, found {magic!r}")
    if version != VERSION:
        raise FormatError(f"version: expected {VERSION} at offset 4, found {version}")
    if labeled not in (0, 1):
        raise FormatError(f"label_present: expected 0 or 1 at offset 15, found {labeled}")
    want = expected_size(count, c, h, w, bool(labeled))
    if len(buf) != want:
        raise FormatError(f"length: expected {want} bytes for {count} records, got {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size)
    if labeled:
        record = np.dtype([("px", np.uint8, c * h * w), ("label", "<u2")])
        rows = body.view(record)
        pixels = rows["px"].reshape(count, c, h, w).copy()
        labels = rows["label"].astype(np.int64)
    else:
        pixels = body.reshape(count, c, h, w).copy()
        labels = None
    return Dataset(pixels, labels)


def save(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())
