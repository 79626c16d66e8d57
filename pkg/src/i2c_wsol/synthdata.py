"""Synthetic shape-class images with exact ground-truth boxes.

Each image holds one saturated foreground shape over a grey background with
soft low-saturation Gaussian blobs and pixel noise.  The box is read off the
rasterized shape mask, so it is tight by construction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .locmap import BBox

CLASS_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "bar_horizontal",
    "bar_vertical",
    "diamond",
)

SPLITS = ("train", "val", "test")
MAGIC = b"I2CD"
VERSION = 1
_HEAD = struct.Struct("<4sIIII")  # magic, version, count, height, width
_SAMPLE_HEAD = struct.Struct("<II")


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    image_size: int = 64
    counts: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 500})
    min_half_extent: int = 8
    max_half_extent: int = 20
    clutter_blobs: tuple[int, int] = (3, 7)
    clutter_saturation: float = 0.25
    clutter_contrast: float = 0.18
    foreground_saturation: tuple[float, float] = (0.65, 1.0)
    foreground_value: tuple[float, float] = (0.65, 1.0)
    texture_jitter: float = 0.08
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must lie in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        if self.image_size < 16:
            raise ConfigError(f"image_size {self.image_size} too small")
        if not 2 <= self.min_half_extent <= self.max_half_extent:
            raise ConfigError("need 2 <= min_half_extent <= max_half_extent")
        for split, n in self.counts.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            if n < 2 * self.num_classes:
                raise ConfigError(f"split {split!r} needs at least 2 images per class, got {n} total")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int
    gt_boxes: list[BBox]
    sample_id: int


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def shape_mask(kind: str, size: int, cy: float, cx: float, s: float) -> np.ndarray:
    """Boolean mask of one shape centred at pixel ``(cy, cx)`` with half-extent ``s``."""
    rr, cc = np.mgrid[0:size, 0:size]
    dr, dc = rr - cy, cc - cx
    d2 = dr * dr + dc * dc
    if kind == "disk":
        return d2 <= s * s
    if kind == "square":
        return (np.abs(dr) <= s) & (np.abs(dc) <= s)
    if kind == "triangle":
        return (dr >= -s) & (dr <= s) & (np.abs(dc) <= (dr + s) / 2.0)
    if kind == "ring":
        inner = 0.55 * s
        return (d2 <= s * s) & (d2 > inner * inner)
    if kind == "cross":
        t = s / 3.0
        return ((np.abs(dr) <= s) & (np.abs(dc) <= t)) | ((np.abs(dc) <= s) & (np.abs(dr) <= t))
    if kind == "bar_horizontal":
        return (np.abs(dr) <= s / 3.5) & (np.abs(dc) <= s)
    if kind == "bar_vertical":
        return (np.abs(dc) <= s / 3.5) & (np.abs(dr) <= s)
    if kind == "diamond":
        return np.abs(dr) + np.abs(dc) <= s
    raise ConfigError(f"unknown shape {kind!r}")


def mask_bbox(mask: np.ndarray) -> BBox | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _background(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    base = rng.uniform(0.25, 0.5)
    img = np.full((n, n, 3), base)
    rr, cc = np.mgrid[0:n, 0:n]
    for _ in range(int(rng.integers(spec.clutter_blobs[0], spec.clutter_blobs[1] + 1))):
        cy, cx = rng.uniform(0, n, size=2)
        sy, sx = rng.uniform(3.0, 10.0, size=2)
        colour = _hsv_to_rgb(rng.uniform(), rng.uniform(0, spec.clutter_saturation), 1.0)
        amp = rng.uniform(-1.0, 1.0) * spec.clutter_contrast
        g = np.exp(-0.5 * (((rr - cy) / sy) ** 2 + ((cc - cx) / sx) ** 2))
        img += amp * g[..., None] * colour
    return img


def generate_sample(spec: DatasetSpec, class_id: int, rng: np.random.Generator, sample_id: int = 0) -> Sample:
    if not 0 <= class_id < spec.num_classes:
        raise ConfigError(f"class {class_id} outside [0, {spec.num_classes})")
    n = spec.image_size
    kind = CLASS_NAMES[class_id]
    for _ in range(100):
        s = rng.uniform(spec.min_half_extent, spec.max_half_extent)
        lo, hi = s + 1.0, n - 2.0 - s
        if hi <= lo:
            continue
        cy, cx = rng.uniform(lo, hi, size=2)
        mask = shape_mask(kind, n, cy, cx, s)
        box = mask_bbox(mask)
        if box is not None and box.is_valid(n, n):
            break
    else:
        raise ConfigError(f"could not place a {kind} on a {n}x{n} canvas after 100 attempts")

    img = _background(spec, rng)
    colour = _hsv_to_rgb(rng.uniform(), rng.uniform(*spec.foreground_saturation), rng.uniform(*spec.foreground_value))
    texture = 1.0 + spec.texture_jitter * rng.standard_normal((n, n, 1))
    img = np.where(mask[..., None], colour * texture, img)
    img += spec.noise_std * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(np.ascontiguousarray(img.transpose(2, 0, 1)), class_id, [box], sample_id)


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS.index(split), int(index), 0xDA7A]))


def generate_split(spec: DatasetSpec, split: str) -> list[Sample]:
    """Class-balanced split: sample ``i`` has class ``i mod Y``, each on its own RNG stream."""
    count = spec.counts[split]
    return [
        generate_sample(spec, i % spec.num_classes, sample_rng(spec.seed, split, i), sample_id=i)
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# Dataset container and batch sampler
# ---------------------------------------------------------------------------


class Dataset:
    """A split held as stacked arrays plus per-class index lists."""

    def __init__(self, samples: Sequence[Sample], num_classes: int | None = None):
        if not samples:
            raise DataFormatError("dataset split is empty")
        self.samples = list(samples)
        self.images = np.stack([s.image for s in self.samples]).astype(np.float64)
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self.num_classes = int(num_classes if num_classes is not None else self.labels.max() + 1)
        self.by_class = [np.flatnonzero(self.labels == y) for y in range(self.num_classes)]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


def pair_batch_sampler(dataset: Dataset, categories: int, per_category: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a batch holding ``per_category`` images from each of ``categories`` random classes.

    Classes are drawn without replacement, images without replacement within
    a class, and the batch order is shuffled.
    """
    if not 1 <= categories <= dataset.num_classes:
        raise ConfigError(f"cannot draw {categories} categories from {dataset.num_classes}")
    if per_category < 1:
        raise ConfigError(f"images per category must be >= 1, got {per_category}")
    classes = rng.choice(dataset.num_classes, size=categories, replace=False)
    picks = []
    for y in classes:
        pool = dataset.by_class[y]
        if len(pool) < per_category:
            raise ConfigError(f"class {y} has {len(pool)} images, need {per_category}")
        picks.append(rng.choice(pool, size=per_category, replace=False))
    batch = np.concatenate(picks)
    return batch[rng.permutation(len(batch))]


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def write_split(path, samples: Sequence[Sample]) -> None:
    size = samples[0].image.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(samples), size, size))
        for s in samples:
            fh.write(_SAMPLE_HEAD.pack(s.label, len(s.gt_boxes)))
            for b in s.gt_boxes:
                fh.write(struct.pack("<4I", *b))
            fh.write(np.ascontiguousarray(s.image.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_split(path) -> list[Sample]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise DataFormatError(f"{path}: header truncated", offset=len(buf))
    magic, version, count, h, w = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}", offset=4)
    pos = _HEAD.size
    npix = h * w * 3
    samples = []
    for i in range(count):
        if pos + _SAMPLE_HEAD.size > len(buf):
            raise DataFormatError(f"{path}: sample {i} truncated", offset=pos)
        label, nbox = _SAMPLE_HEAD.unpack_from(buf, pos)
        pos += _SAMPLE_HEAD.size
        if nbox < 1 or pos + 16 * nbox + 4 * npix > len(buf):
            raise DataFormatError(f"{path}: sample {i} has bad box count or truncated data", offset=pos)
        boxes = []
        for _ in range(nbox):
            box = BBox(*struct.unpack_from("<4I", buf, pos))
            if not box.is_valid(w, h):
                raise DataFormatError(f"{path}: sample {i} box {tuple(box)} outside {w}x{h}", offset=pos)
            boxes.append(box)
            pos += 16
        img = np.frombuffer(buf, dtype="<f4", count=npix, offset=pos).reshape(h, w, 3)
        pos += 4 * npix
        samples.append(Sample(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32), label, boxes, i))
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes", offset=pos)
    return samples


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(spec: DatasetSpec, out_dir) -> dict[str, str]:
    """Generate every split to ``out_dir`` and write ``manifest.txt``; returns split hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for split in SPLITS:
        if split not in spec.counts:
            continue
        path = out / f"{split}.bin"
        write_split(path, generate_split(spec, split))
        hashes[split] = file_sha256(path)
    lines = [
        "# synthetic shape dataset",
        f"seed = {spec.seed}",
        f"num_classes = {spec.num_classes}",
        f"image_size = {spec.image_size}",
        f"classes = {','.join(CLASS_NAMES[: spec.num_classes])}",
    ]
    lines += [f"count_{split} = {spec.counts[split]}" for split in hashes]
    lines += [f"sha256_{split} = {h}" for split, h in hashes.items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return hashes


def load_split(data_dir, split: str, num_classes: int | None = None) -> Dataset:
    path = Path(data_dir) / f"{split}.bin"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset split {path}; run `generate` first")
    return Dataset(read_split(path), num_classes)


def dataset_hash(data_dir) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        path = Path(data_dir) / f"{split}.bin"
        if path.exists():
            h.update(split.encode())
            h.update(Path(path).read_bytes())
    return h.hexdigest()
