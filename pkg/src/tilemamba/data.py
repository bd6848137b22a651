"""Synthetic tile dataset, tile file format, and dataset splitting.

Tiles are band-limited textures: sinusoidal gratings with random phase
and orientation, class-conditional spatial period, plus Gaussian pixel
noise, normalized to [0, 1]. The two classes differ in their dominant
spatial frequency, so they are separable by construction and the
separation is checkable with a Fourier peak.

Tile file layout (little-endian): magic 'XLMT', version u16, dims C/H/W
u32 each, label u8, precision u8 (bytes per element), raw payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .tensor import RngStream

__all__ = [
    "TILE_MAGIC",
    "SyntheticSpec",
    "ManifestEntry",
    "DatasetManifest",
    "save_tile",
    "load_tile",
    "generate_synthetic_dataset",
    "split_dataset",
    "load_split_arrays",
    "dominant_radial_frequency",
]

TILE_MAGIC = b"XLMT"
TILE_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def save_tile(path, image: np.ndarray, label: int) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractError(f"tile image must be (C,H,W), got {image.shape}")
    if label not in (0, 1):
        raise ContractError(f"tile label must be 0 or 1, got {label}")
    itemsize = image.dtype.itemsize
    if image.dtype not in (np.float32, np.float64):
        image = image.astype(np.float32)
        itemsize = 4
    c, h, w = image.shape
    with open(path, "wb") as f:
        f.write(TILE_MAGIC)
        f.write(struct.pack("<H", TILE_VERSION))
        f.write(struct.pack("<III", c, h, w))
        f.write(struct.pack("<BB", label, itemsize))
        le = "<f4" if itemsize == 4 else "<f8"
        f.write(np.ascontiguousarray(image, dtype=le).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"tile truncated while reading {what}")
    return buf


def load_tile(path) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != TILE_MAGIC:
            raise FormatError(f"bad tile magic {magic!r}, expected {TILE_MAGIC!r}")
        version = struct.unpack("<H", _read_exact(f, 2, "version"))[0]
        if version != TILE_VERSION:
            raise FormatError(f"unsupported tile version {version}")
        c, h, w = struct.unpack("<III", _read_exact(f, 12, "dims"))
        label, itemsize = struct.unpack("<BB", _read_exact(f, 2, "label/precision"))
        if label not in (0, 1):
            raise FormatError(f"tile label byte {label} outside {{0,1}}")
        if itemsize not in (4, 8):
            raise FormatError(f"bad precision byte {itemsize}")
        payload = _read_exact(f, c * h * w * itemsize, "payload")
        if f.read(1):
            raise FormatError("trailing bytes after tile payload")
    dt = "<f4" if itemsize == 4 else "<f8"
    return np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy(), int(label)


@dataclass
class SyntheticSpec:
    samples_per_class: int = 2000
    image_size: int = 224
    class0_period: float = 6.0
    class0_amplitude: float = 0.35
    class1_period: float = 14.0
    class1_amplitude: float = 0.35
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.samples_per_class < 20:
            raise ConfigError("need at least 20 samples per class")
        if self.class0_period == self.class1_period and \
                self.class0_amplitude == self.class1_amplitude:
            raise ConfigError(
                "class textures must differ in at least one spectral parameter"
            )
        for p in (self.class0_period, self.class1_period):
            if not 2.0 <= p <= self.image_size:
                raise ConfigError(f"period {p} outside [2, {self.image_size}]")


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = ""


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    split_seed: int = 0
    counts: Dict[str, int] = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "split_seed": self.split_seed,
            "counts": self.counts,
            "entries": [
                {"path": e.path, "label": e.label, "split": e.split}
                for e in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        entries = [ManifestEntry(e["path"], int(e["label"]), e.get("split", ""))
                   for e in payload.get("entries", [])]
        return cls(entries=entries, split_seed=int(payload.get("split_seed", 0)),
                   counts=dict(payload.get("counts", {})))


def _grating(size: int, period: float, amplitude: float, sigma: float,
             rng: RngStream) -> np.ndarray:
    theta = float(rng.uniform()) * np.pi
    freq = size / period                       # cycles per image width
    fx = freq * np.cos(theta)
    fy = freq * np.sin(theta)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    arg = 2.0 * np.pi * (fx * xx + fy * yy) / size
    phases = rng.uniform((3,)) * 2.0 * np.pi
    img = 0.5 + amplitude * np.sin(arg[None, :, :] + phases[:, None, None])
    if sigma > 0:
        img = img + rng.normal((3, size, size), sigma)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write one tile file per sample plus a split manifest.

    Fully determined by ``spec.seed``: the texture stream and the split
    assignment both derive from it.
    """
    spec.validate()
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(spec.seed).child("textures")
    entries: List[ManifestEntry] = []
    class_params = [
        (spec.class0_period, spec.class0_amplitude),
        (spec.class1_period, spec.class1_amplitude),
    ]
    for label, (period, amplitude) in enumerate(class_params):
        for i in range(spec.samples_per_class):
            img = _grating(spec.image_size, period, amplitude,
                           spec.noise_sigma, rng)
            rel = f"tiles/class{label}_{i:05d}.xlmt"
            save_tile(out_dir / rel, img, label)
            entries.append(ManifestEntry(path=rel, label=label))
    manifest = split_dataset(entries, spec.seed)
    manifest.save(out_dir / "manifest.json")
    return manifest


def split_dataset(entries: Sequence[ManifestEntry], seed: int) -> DatasetManifest:
    """Stratified 70/15/15 split with largest-remainder rounding,
    shuffled per class by ``seed``."""
    if len(entries) < 10:
        raise ContractError(f"need at least 10 entries to split, got {len(entries)}")
    by_label: Dict[int, List[ManifestEntry]] = {}
    for e in entries:
        by_label.setdefault(e.label, []).append(e)
    rng = RngStream(seed).child("split")
    out: List[ManifestEntry] = []
    carry = [0.0] * len(SPLIT_FRACTIONS)
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 3:
            raise ContractError(
                f"class {label} has {len(group)} entries; need at least 3"
            )
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        sizes = _largest_remainder(len(group), SPLIT_FRACTIONS, carry)
        pos = 0
        for split_name, size in zip(SPLIT_NAMES, sizes):
            for e in shuffled[pos:pos + size]:
                out.append(ManifestEntry(e.path, e.label, split_name))
            pos += size
    counts = {name: sum(1 for e in out if e.split == name) for name in SPLIT_NAMES}
    return DatasetManifest(entries=out, split_seed=seed, counts=counts)


def _largest_remainder(n: int, fractions: Sequence[float],
                       carry: List[float]) -> List[int]:
    """Largest-remainder rounding with an error-diffusion carry so the
    rounding errors of successive (per-class) calls cancel instead of
    stacking; keeps overall split sizes within one entry of exact."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    leftover = n - sum(sizes)
    scores = [raw[i] - sizes[i] + carry[i] for i in range(len(raw))]
    ranked = sorted(range(len(raw)), key=lambda i: (-scores[i], i))
    for i in ranked[:leftover]:
        sizes[i] += 1
    for i in range(len(raw)):
        carry[i] += raw[i] - sizes[i]
    return sizes


def load_split_arrays(manifest_path, split: str,
                      dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Load every tile of one split into (N,C,H,W) images + (N,) labels."""
    if split not in SPLIT_NAMES:
        raise ConfigError(f"unknown split {split!r}; options: {SPLIT_NAMES}")
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    base = manifest_path.parent
    images = []
    labels = []
    for e in manifest.entries:
        if e.split != split:
            continue
        img, label = load_tile(base / e.path)
        if label != e.label:
            raise FormatError(
                f"label mismatch for {e.path}: manifest {e.label}, tile {label}"
            )
        images.append(img.astype(dtype))
        labels.append(label)
    if not images:
        raise ContractError(f"split {split!r} is empty")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def dominant_radial_frequency(image: np.ndarray) -> float:
    """Radius (cycles/image) of the strongest non-DC Fourier peak of the
    channel-mean image; the oracle for class spectral separation."""
    chan = np.asarray(image).mean(axis=0)
    chan = chan - chan.mean()
    spec = np.abs(np.fft.fft2(chan))
    size = chan.shape[0]
    fy = np.fft.fftfreq(size) * size
    fx = np.fft.fftfreq(size) * size
    peak = np.unravel_index(np.argmax(spec), spec.shape)
    return float(np.hypot(fy[peak[0]], fx[peak[1]]))
