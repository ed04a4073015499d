"""Procedural segmentation scenes with a planted two-level hierarchy.

Classes come in groups. Every class in a group shares the group's base
color (a strong cue that even a per-pixel classifier can exploit), and
classes within a group differ only by a sinusoidal brightness texture
(wavelength and orientation), a cue that needs spatial context to read.
Scenes are a handful of axis-aligned rectangles and disks painted over
a gray background; background pixels carry the ignore label.

The grouping is returned alongside the data so clustering-recovery
tests have an exact oracle, and a nearest-centroid color probe is
provided to verify that raw colors alone confuse within-group classes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .segmetrics import (
    DEFAULT_IGNORE_INDEX,
    ClusterMap,
    ConfusionMatrix,
    accumulate,
)
from .seeding import stream

DATASET_MAGIC = b"HSDS"
DATASET_VERSION = 1

BACKGROUND_COLOR = 0.35

GROUP_BASE_COLORS = (
    (0.90, 0.20, 0.20),
    (0.20, 0.55, 0.90),
    (0.25, 0.80, 0.30),
    (0.85, 0.75, 0.20),
    (0.70, 0.30, 0.80),
    (0.90, 0.55, 0.25),
)

TEXTURE_WAVELENGTHS = (4.0, 8.0)
TEXTURE_BRIGHTNESS_MID = 0.55
TEXTURE_BRIGHTNESS_AMP = 0.45


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters; the defaults are the reference corpus."""

    height: int = 64
    width: int = 64
    num_groups: int = 3
    classes_per_group: int = 4
    shapes_min: int = 3
    shapes_max: int = 6
    noise_sigma: float = 0.05
    seed: int = 0
    alignment: int = 8

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError("images must be at least 16x16")
        if self.alignment < 1:
            raise ValueError("alignment must be positive")
        if self.height % self.alignment or self.width % self.alignment:
            raise ValueError(
                f"dims {self.height}x{self.width} must be divisible by "
                f"alignment {self.alignment}"
            )
        if not 1 <= self.num_groups <= len(GROUP_BASE_COLORS):
            raise ValueError(
                f"num_groups must lie in [1, {len(GROUP_BASE_COLORS)}]"
            )
        if not 1 <= self.classes_per_group <= 4:
            raise ValueError("classes_per_group must lie in [1, 4]")
        if self.num_classes > DEFAULT_IGNORE_INDEX - 1:
            raise ValueError("too many classes for uint8 labels")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 1 <= shapes_min <= shapes_max")
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError("noise_sigma must be finite and >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.num_groups * self.classes_per_group


@dataclass(frozen=True)
class PlantedHierarchy:
    """The generator's ground-truth class grouping."""

    num_groups: int
    classes_per_group: int
    group_map: ClusterMap

    @classmethod
    def for_spec(cls, spec: SceneSpec) -> "PlantedHierarchy":
        assignment = np.arange(spec.num_classes) // spec.classes_per_group
        return cls(
            spec.num_groups,
            spec.classes_per_group,
            ClusterMap(spec.num_classes, spec.num_groups, assignment),
        )


@dataclass(eq=False)
class SegDataset:
    """Images in [0, 1] float32 (N, H, W, 3); labels uint8 (N, H, W)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.labels.shape != self.images.shape[:3]:
            raise ValueError(
                f"labels {self.labels.shape} do not match images {self.images.shape}"
            )
        bad = (self.labels >= self.num_classes) & (self.labels != self.ignore_index)
        if np.any(bad):
            raise ValueError("labels must be class ids or the ignore index")

    @property
    def count(self) -> int:
        return int(self.images.shape[0])


def class_appearance(
    spec: SceneSpec, class_id: int, phase: float = 0.0
) -> np.ndarray:
    """Full-image color field (H, W, 3) for one class.

    Group index picks the base color; the within-group variant picks the
    texture: variants 0 and 1 use the short wavelength, 2 and 3 the
    long one; even variants modulate along x, odd ones along y.
    """
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {spec.num_classes})")
    group = class_id // spec.classes_per_group
    variant = class_id % spec.classes_per_group
    wavelength = TEXTURE_WAVELENGTHS[variant // 2]
    base = np.array(GROUP_BASE_COLORS[group])
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    coord = xs if variant % 2 == 0 else ys
    brightness = TEXTURE_BRIGHTNESS_MID + TEXTURE_BRIGHTNESS_AMP * np.sin(
        2.0 * np.pi * coord / wavelength + phase
    )
    return brightness[:, :, None] * base[None, None, :]


def _paint_sample(spec: SceneSpec, rng: np.random.Generator, forced_class: int):
    height, width = spec.height, spec.width
    image = np.full((height, width, 3), BACKGROUND_COLOR)
    labels = np.full((height, width), DEFAULT_IGNORE_INDEX, dtype=np.uint8)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    shortest = min(height, width)
    lo, hi = shortest // 4, shortest // 2

    classes = [int(rng.integers(spec.num_classes)) for _ in range(n_shapes - 1)]
    classes.append(forced_class)  # painted last, so it always stays visible

    ys, xs = np.mgrid[0:height, 0:width]
    for class_id in classes:
        kind = int(rng.integers(2))
        if kind == 0:
            h_s = int(rng.integers(lo, hi + 1))
            w_s = int(rng.integers(lo, hi + 1))
            y0 = int(rng.integers(0, height - h_s + 1))
            x0 = int(rng.integers(0, width - w_s + 1))
            mask = np.zeros((height, width), dtype=bool)
            mask[y0 : y0 + h_s, x0 : x0 + w_s] = True
        else:
            radius = int(rng.integers(lo, hi + 1)) // 2
            cy = int(rng.integers(radius, height - radius + 1))
            cx = int(rng.integers(radius, width - radius + 1))
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius * radius
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        field = class_appearance(spec, class_id, phase)
        image[mask] = field[mask]
        labels[mask] = class_id

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), labels


def generate(spec: SceneSpec, count: int) -> tuple[SegDataset, PlantedHierarchy]:
    """Render ``count`` scenes; per-sample randomness is independent.

    The last shape of sample i always has class i mod K, so every class
    is present whenever count >= K.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    images = np.empty((count, spec.height, spec.width, 3), dtype=np.float32)
    labels = np.empty((count, spec.height, spec.width), dtype=np.uint8)
    for i in range(count):
        rng = stream(spec.seed, "data", i)
        image, grid = _paint_sample(spec, rng, i % spec.num_classes)
        images[i] = image.astype(np.float32)
        labels[i] = grid
    dataset = SegDataset(images, labels, spec.num_classes)
    return dataset, PlantedHierarchy.for_spec(spec)


def split(
    dataset: SegDataset, fraction: float, seed: int
) -> tuple[SegDataset, SegDataset]:
    """Disjoint two-way split; the first part gets round(N * fraction)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    count = dataset.count
    n_first = int(round(count * fraction))
    if n_first == 0 or n_first == count:
        raise ValueError("split leaves an empty side")
    order = stream(seed, "split").permutation(count)
    first = np.sort(order[:n_first])
    second = np.sort(order[n_first:])
    make = lambda idx: SegDataset(  # noqa: E731
        dataset.images[idx], dataset.labels[idx], dataset.num_classes,
        dataset.ignore_index,
    )
    return make(first), make(second)


def save_dataset(path: str | Path, dataset: SegDataset) -> None:
    """Binary layout: magic, version, count, H, W, K, then per sample
    the raw float32 image followed by the uint8 label grid."""
    count = dataset.count
    height, width = dataset.images.shape[1], dataset.images.shape[2]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII", DATASET_VERSION, count, height, width, dataset.num_classes
            )
        )
        for i in range(count):
            fh.write(np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels[i]).tobytes())


def load_dataset(path: str | Path) -> SegDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError("not a dataset file")
        header = fh.read(20)
        if len(header) != 20:
            raise ValueError("dataset header truncated")
        version, count, height, width, num_classes = struct.unpack("<IIIII", header)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        image_bytes = height * width * 3 * 4
        label_bytes = height * width
        images = np.empty((count, height, width, 3), dtype=np.float32)
        labels = np.empty((count, height, width), dtype=np.uint8)
        for i in range(count):
            raw = fh.read(image_bytes + label_bytes)
            if len(raw) != image_bytes + label_bytes:
                raise ValueError(f"sample {i}: unexpected end of file")
            images[i] = np.frombuffer(raw[:image_bytes], dtype="<f4").reshape(
                height, width, 3
            )
            labels[i] = np.frombuffer(raw[image_bytes:], dtype=np.uint8).reshape(
                height, width
            )
        if fh.read(1):
            raise ValueError("trailing bytes after last sample")
    return SegDataset(images, labels, num_classes)


def linear_color_probe_confusion(dataset: SegDataset) -> ConfusionMatrix:
    """Nearest class-mean classification of raw pixel colors.

    Fits per-class mean colors on the labeled pixels of the dataset and
    re-predicts the same pixels, exposing which classes raw color alone
    can separate. Classes with no pixels are never predicted.
    """
    k = dataset.num_classes
    flat_labels = dataset.labels.reshape(-1)
    flat_colors = dataset.images.reshape(-1, 3).astype(np.float64)
    keep = flat_labels != dataset.ignore_index
    centroids = np.zeros((k, 3))
    present = np.zeros(k, dtype=bool)
    for c in range(k):
        mask = flat_labels == c
        if np.any(mask):
            centroids[c] = flat_colors[mask].mean(axis=0)
            present[c] = True
    if not np.any(present):
        raise ValueError("dataset has no labeled pixels")

    dists = ((flat_colors[keep, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    dists[:, ~present] = np.inf
    preds = np.zeros(flat_labels.shape, dtype=np.int64)
    preds[keep] = dists.argmin(axis=1)

    conf = ConfusionMatrix.empty(k, dataset.ignore_index)
    accumulate(conf, flat_labels, preds)
    return conf
