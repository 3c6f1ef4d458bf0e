"""Synthetic glyph data, parametric corruptions (the latent domains), and
mixed / continual test-stream builders."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .core import Rng, read_container, write_container

# --------------------------------------------------------------------- dataset


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, path: str | Path) -> None:
        write_container(
            path,
            {
                "images": self.images.astype(np.float32),
                "labels": self.labels.astype(np.uint8),
                "num_classes": np.array([self.num_classes], dtype=np.uint8),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "LabeledDataset":
        t = read_container(path)
        labels = t["labels"].astype(np.int64)
        num_classes = int(t["num_classes"][0]) if "num_classes" in t else int(labels.max()) + 1
        return cls(t["images"].astype(np.float32), labels, num_classes)


def _glyph(kind: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    R = np.hypot(X, Y)
    box = (np.abs(X) < 1) & (np.abs(Y) < 1)
    M = np.maximum(np.abs(X), np.abs(Y))
    if kind == 0:  # filled disk
        return R < 1
    if kind == 1:  # ring
        return (R < 1) & (R > 0.55)
    if kind == 2:  # plus
        return ((np.abs(X) < 0.3) & (np.abs(Y) < 1)) | ((np.abs(Y) < 0.3) & (np.abs(X) < 1))
    if kind == 3:  # horizontal bars
        return box & (np.floor((Y + 1) * 2.5) % 2 == 0)
    if kind == 4:  # checker
        return box & ((np.floor((X + 1) * 2) + np.floor((Y + 1) * 2)) % 2 == 0)
    if kind == 5:  # triangle
        return (Y < 1) & (np.abs(X) < (Y + 1) / 2)
    if kind == 6:  # vertical bars
        return box & (np.floor((X + 1) * 2.5) % 2 == 0)
    if kind == 7:  # square outline
        return (M < 1) & (M > 0.6)
    if kind == 8:  # diamond
        return np.abs(X) + np.abs(Y) < 1
    if kind == 9:  # diagonal cross
        return ((np.abs(X - Y) < 0.4) | (np.abs(X + Y) < 0.4)) & (M < 1)
    if kind == 10:  # half disk
        return (R < 1) & (Y > 0)
    if kind == 11:  # L shape
        return box & ((X < -0.4) | (Y > 0.4))
    if kind == 12:  # double ring
        return ((R < 1) & (R > 0.75)) | ((R < 0.45) & (R > 0.2))
    if kind == 13:  # dot grid
        return box & (np.hypot((X + 1) % 0.67 - 0.33, (Y + 1) % 0.67 - 0.33) < 0.2)
    if kind == 14:  # frame with center dot
        return ((M < 1) & (M > 0.75)) | (R < 0.3)
    if kind == 15:  # corner triangle
        return box & (X + Y < 0)
    raise ValueError(f"unknown glyph {kind}")


MAX_CLASSES = 16
TEXTURE_AMPLITUDE = 0.1


def render_glyph(kind: int, h: int, w: int, rng: Rng) -> np.ndarray:
    """One ``3 x h x w`` image of glyph ``kind`` on a textured background."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cx = w / 2 + rng.uniform(-w / 8, w / 8)
    cy = h / 2 + rng.uniform(-h / 8, h / 8)
    r = min(h, w) * rng.uniform(0.24, 0.34)
    mask = _glyph(kind, (xx - cx) / r, (yy - cy) / r).astype(np.float64)

    bg = rng.uniform(0.25, 0.45) + rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    # fine checker texture with fixed contrast and random phase, plus mild grain
    iy, ix = np.mgrid[0:h, 0:w]
    ox, oy = rng.integers(0, 2, size=2)
    checker = np.where((ix + ox + iy + oy) % 2 == 0, TEXTURE_AMPLITUDE, -TEXTURE_AMPLITUDE)
    texture = checker[None] + 0.02 * rng.normal(size=(3, h, w))
    fg = rng.uniform(0.65, 0.95) + rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    img = bg + texture * (1.0 - mask[None]) + mask[None] * (fg - bg)
    return np.clip(img, 0.0, 1.0)


def make_shapes_dataset(n_per_class: int, num_classes: int, h: int, w: int, rng: Rng) -> LabeledDataset:
    """Balanced glyph-classification dataset, samples shuffled."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"unsupported class count {num_classes}; expected 2..{MAX_CLASSES}")
    if h != w or h not in (16, 32):
        raise ValueError("supported sizes are 16x16 and 32x32")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.stack([render_glyph(int(c), h, w, rng) for c in labels]) if len(labels) else np.zeros((0, 3, h, w))
    return LabeledDataset(images.astype(np.float32), labels, num_classes)


# ------------------------------------------------------------------ corruptions


class Corruption(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    IMPULSE_NOISE = "impulse_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    CONTRAST = "contrast"
    PIXELATE = "pixelate"
    IDENTITY = "identity"


SEVERITY_TABLE = {
    Corruption.GAUSSIAN_NOISE: (0.04, 0.06, 0.08, 0.12, 0.18),
    Corruption.IMPULSE_NOISE: (0.01, 0.02, 0.04, 0.07, 0.10),
    Corruption.GAUSSIAN_BLUR: (0.4, 0.6, 0.9, 1.2, 1.6),
    Corruption.CONTRAST: (0.75, 0.6, 0.45, 0.3, 0.2),
    Corruption.PIXELATE: (2, 3, 4, 6, 8),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: Corruption
    severity: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", Corruption(self.kind))
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def param(self):
        if self.kind is Corruption.IDENTITY:
            return None
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @classmethod
    def parse(cls, names: str | Iterable[str], severity: int = 5) -> list["CorruptionSpec"]:
        if isinstance(names, str):
            names = [n for n in names.split(",") if n]
        return [cls(Corruption(n.strip()), severity) for n in names]

    def __str__(self) -> str:
        return self.kind.value if self.kind is Corruption.IDENTITY else f"{self.kind.value}-{self.severity}"


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    h, w = img.shape[-2:]
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img, rows, axis=-2), cols, axis=-1)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    means = sums / (rh[:, None] * cw[None, :])
    return np.repeat(np.repeat(means, rh, axis=-2), cw, axis=-1)


def apply_corruption(image: np.ndarray, spec: CorruptionSpec, rng: Rng) -> np.ndarray:
    """Corrupt one ``c x h x w`` image in ``[0, 1]``; output clipped to ``[0, 1]``."""
    if spec.kind is Corruption.IDENTITY:
        return image
    x = np.asarray(image, dtype=np.float64)
    p = spec.param
    if spec.kind is Corruption.GAUSSIAN_NOISE:
        out = x + rng.normal(0.0, p, size=x.shape)
    elif spec.kind is Corruption.IMPULSE_NOISE:
        u = rng.uniform(size=x.shape)
        out = x.copy()
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 1.0
    elif spec.kind is Corruption.GAUSSIAN_BLUR:
        out = ndimage.gaussian_filter(x, sigma=(0, p, p), mode="reflect", truncate=4.0)
    elif spec.kind is Corruption.CONTRAST:
        out = 0.5 + p * (x - 0.5)
    elif spec.kind is Corruption.PIXELATE:
        out = _pixelate(x, p)
    else:  # pragma: no cover
        raise ValueError(spec.kind)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------- streams


@dataclass(frozen=True)
class StreamEvent:
    """One test sample. ``true_label`` and ``true_domain`` are for scoring only."""

    image: np.ndarray
    true_label: int
    true_domain: int
    index: int


def _by_class(dataset: LabeledDataset) -> list[np.ndarray]:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]


def _draw(dataset, pools, domain, specs, rng, index) -> StreamEvent:
    present = [c for c, p in enumerate(pools) if len(p)]
    c = present[int(rng.integers(len(present)))]
    i = int(pools[c][int(rng.integers(len(pools[c])))])
    img = apply_corruption(dataset.images[i], specs[domain], rng)
    return StreamEvent(img, int(c), int(domain), index)


def mixed_stream(dataset: LabeledDataset, specs: list[CorruptionSpec], length: int, rng: Rng) -> Iterator[StreamEvent]:
    """Each event picks domain, class and exemplar independently and uniformly."""
    if not specs:
        raise ValueError("at least one corruption spec required")
    pools = _by_class(dataset)
    for t in range(length):
        domain = int(rng.integers(len(specs)))
        yield _draw(dataset, pools, domain, specs, rng, t)


def continual_stream(
    dataset: LabeledDataset, specs: list[CorruptionSpec], per_domain_length: int, rng: Rng
) -> Iterator[StreamEvent]:
    """Domains in the given order, each contiguous for ``per_domain_length`` events."""
    pools = _by_class(dataset)
    t = 0
    for domain in range(len(specs)):
        for _ in range(per_domain_length):
            yield _draw(dataset, pools, domain, specs, rng, t)
            t += 1


def batch(events: Iterable[StreamEvent], n: int) -> Iterator[list[StreamEvent]]:
    """Group events into lists of ``n``; the last list may be shorter."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    it = iter(events)
    while chunk := list(itertools.islice(it, n)):
        yield chunk


def images_of(events: list[StreamEvent]) -> np.ndarray:
    """Read-only ``(n, c, h, w)`` array of the events' images, nothing else."""
    arr = np.stack([e.image for e in events]).astype(np.float32)
    arr.flags.writeable = False
    return arr
