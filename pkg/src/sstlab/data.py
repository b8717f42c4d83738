"""Dataset ingestion: IDX image files, synthetic tasks, deterministic splits.

Feature vectors always live in [0, 1] (IDX pixels are divided by 255) and
labels are integers in [0, c).  A loaded :class:`Dataset` is immutable in
practice and can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"SSTD"
CACHE_VERSION = 1


class FormatError(ValueError):
    """Malformed file contents."""


class ConfigError(ValueError):
    """Invalid run or dataset configuration."""


@dataclass
class Dataset:
    """Feature matrix ``x`` of shape (count, n) plus integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    n: int
    c: int
    name: str = "dataset"
    image_shape: tuple[int, int] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx], name=name or self.name)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a generated dataset with known ground-truth support.

    Rules:

    * ``majority``: class 1 iff the mean of the support features is >= 0.5.
    * ``parity``: class = XOR over (feature >= 0.5) bits of the support.
    * ``glyphs``: ``c`` classes, each a fixed sparse set of bright pixels on
      a dim noisy background; the label is the identity of the bright
      pattern.  Support is the union of all patterns.

    Labels depend only on the support features in every rule.
    """

    n: int
    c: int = 2
    support: tuple[int, ...] | None = None
    rule: str = "majority"
    count: int = 1000
    seed: int = 0
    glyph_pixels: int = 12
    background_high: float = 0.4
    glyph_low: float = 0.7


def _read_be_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated IDX header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path: str, labels_path: str, name: str = "mnist") -> Dataset:
    """Parse big-endian IDX image/label files into a normalized dataset."""
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        count = _read_be_u32(f)
        rows = _read_be_u32(f)
        cols = _read_be_u32(f)
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError("truncated IDX image payload")
        pixels = np.frombuffer(payload, dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} (expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        label_count = _read_be_u32(f)
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise FormatError("truncated IDX label payload")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if label_count != count:
        raise FormatError(f"image count {count} does not match label count {label_count}")
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    c = int(y.max()) + 1 if count else 0
    return Dataset(x=x, y=y, n=rows * cols, c=c, name=name, image_shape=(rows, cols))


def serialize_idx_pixels(dataset: Dataset) -> bytes:
    """Inverse of the pixel normalization; byte payload in row-major order."""
    return (np.round(dataset.x * 255.0).astype(np.uint8)).tobytes()


def _glyph_templates(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    templates = []
    for _ in range(spec.c):
        templates.append(rng.choice(spec.n, size=spec.glyph_pixels, replace=False))
    return templates


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset according to the spec's rule, reproducibly from the seed."""
    rng = np.random.default_rng(spec.seed)

    if spec.rule == "glyphs":
        templates = _glyph_templates(spec, rng)
        y = np.arange(spec.count, dtype=np.int64) % spec.c
        rng.shuffle(y)
        x = rng.uniform(0.0, spec.background_high, size=(spec.count, spec.n))
        bright = rng.uniform(spec.glyph_low, 1.0, size=(spec.count, spec.glyph_pixels))
        for i in range(spec.count):
            x[i, templates[y[i]]] = bright[i]
        support = tuple(sorted({int(j) for t in templates for j in t}))
        side = int(np.sqrt(spec.n))
        shape = (side, side) if side * side == spec.n else None
        return Dataset(
            x=x,
            y=y,
            n=spec.n,
            c=spec.c,
            name="glyphs",
            image_shape=shape,
            meta={"support": support, "templates": [t.tolist() for t in templates]},
        )

    if spec.support is None or len(spec.support) == 0:
        raise ConfigError(f"rule {spec.rule!r} needs a non-empty support set")
    support = np.asarray(spec.support, dtype=np.int64)
    if support.min() < 0 or support.max() >= spec.n:
        raise ConfigError("support indices out of range")

    x = rng.uniform(0.0, 1.0, size=(spec.count, spec.n))
    if spec.rule == "majority":
        y = (x[:, support].mean(axis=1) >= 0.5).astype(np.int64)
        c = 2
    elif spec.rule == "parity":
        bits = (x[:, support] >= 0.5).astype(np.int64)
        y = bits.sum(axis=1) % 2
        c = 2
    else:
        raise ConfigError(f"unknown synthetic rule {spec.rule!r}")
    if spec.c != c:
        raise ConfigError(f"rule {spec.rule!r} produces {c} classes, spec says {spec.c}")
    return Dataset(
        x=x,
        y=y,
        n=spec.n,
        c=c,
        name=f"synthetic-{spec.rule}",
        meta={"support": tuple(int(i) for i in spec.support)},
    )


def split(
    dataset: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled partition into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    count = len(dataset)
    if count == 0:
        raise ConfigError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(count)
    cut1 = int(round(ratios[0] * count))
    cut2 = cut1 + int(round(ratios[1] * count))
    cut2 = min(cut2, count)
    return (
        dataset.take(perm[:cut1], f"{dataset.name}-train"),
        dataset.take(perm[cut1:cut2], f"{dataset.name}-val"),
        dataset.take(perm[cut2:], f"{dataset.name}-test"),
    )


def save_cache(dataset: Dataset, path: str) -> None:
    """Binary cache: magic, version, n, c, count, f64 features, u8 labels."""
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIII", CACHE_VERSION, dataset.n, dataset.c, len(dataset)))
        f.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())
        f.write(dataset.y.astype(np.uint8).tobytes())


def load_cache(path: str, name: str = "cached") -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise FormatError(f"not a dataset cache: magic {magic!r}")
        version, n, c, count = struct.unpack("<IIII", f.read(16))
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version}")
        x = np.frombuffer(f.read(8 * count * n), dtype="<f8").reshape(count, n).copy()
        y = np.frombuffer(f.read(count), dtype=np.uint8).astype(np.int64)
    side = int(np.sqrt(n))
    shape = (side, side) if side * side == n else None
    return Dataset(x=x, y=y, n=n, c=c, name=name, image_shape=shape)
