"""Confusion-matrix algebra and segmentation metrics.

Class clustering, trade-off curves and merged-class evaluation are all
driven by the K x K confusion matrix, so this module keeps the matrix
exact: counts are 64-bit integers, merging is pure integer addition, and
the CSV form round-trips bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ioutil import read_json, write_json

DEFAULT_IGNORE_INDEX = 255


def default_class_names(num_classes: int) -> list[str]:
    return [f"class{c}" for c in range(num_classes)]


def _first_bad_coordinate(bad: np.ndarray) -> tuple[int, ...]:
    # Row-major position of the first offending entry, for error messages.
    flat = int(np.flatnonzero(bad.ravel())[0])
    return tuple(int(i) for i in np.unravel_index(flat, bad.shape))


@dataclass
class ConfusionMatrix:
    """Pixel counts indexed by (ground-truth row, predicted column)."""

    num_classes: int
    counts: np.ndarray
    ignore_index: int = DEFAULT_IGNORE_INDEX
    class_names: list[str] | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise ValueError(
                f"counts shape {self.counts.shape} != "
                f"({self.num_classes}, {self.num_classes})"
            )
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    @classmethod
    def empty(
        cls,
        num_classes: int,
        ignore_index: int = DEFAULT_IGNORE_INDEX,
        class_names: list[str] | None = None,
    ) -> "ConfusionMatrix":
        zeros = np.zeros((num_classes, num_classes), dtype=np.int64)
        return cls(num_classes, zeros, ignore_index, class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return default_class_names(self.num_classes)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.num_classes,
            self.counts.copy(),
            self.ignore_index,
            None if self.class_names is None else list(self.class_names),
        )


def accumulate(
    conf: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray
) -> ConfusionMatrix:
    """Add one batch of (ground truth, prediction) label grids to ``conf``.

    Pixels whose ground truth equals ``conf.ignore_index`` are skipped.
    Accumulation is additive, so batch order never matters. The matrix is
    updated in place and returned.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    k = conf.num_classes

    bad_pred = (pred < 0) | (pred >= k)
    if np.any(bad_pred):
        coord = _first_bad_coordinate(bad_pred)
        raise ValueError(f"pred label {int(pred[coord])} out of range at {coord}")
    keep = gt != conf.ignore_index
    bad_gt = keep & ((gt < 0) | (gt >= k))
    if np.any(bad_gt):
        coord = _first_bad_coordinate(bad_gt)
        raise ValueError(f"gt label {int(gt[coord])} out of range at {coord}")

    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    conf.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return conf


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class IoU plus the two scalar summaries derived from it.

    ``per_class_iou`` holds NaN for classes whose union (ground truth plus
    predictions) is empty; ``defined`` marks the classes that do have a
    value. ``miou`` averages only over defined classes and is NaN when
    there are none; ``pixel_accuracy`` is NaN for an empty matrix.
    """

    per_class_iou: np.ndarray
    defined: np.ndarray
    miou: float
    pixel_accuracy: float


def metrics_from_confusion(conf: ConfusionMatrix) -> ClassMetrics:
    """Compute per-class IoU, mIoU and pixel accuracy from counts."""
    counts = conf.counts.astype(np.float64)
    diag = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - diag
    defined = union > 0

    iou = np.full(conf.num_classes, np.nan)
    iou[defined] = diag[defined] / union[defined]
    miou = float(iou[defined].mean()) if defined.any() else float("nan")

    total = counts.sum()
    pixel_accuracy = float(diag.sum() / total) if total > 0 else float("nan")
    return ClassMetrics(iou, defined, miou, pixel_accuracy)


@dataclass(eq=False)
class ClusterMap:
    """Surjective assignment of K source classes to k cluster ids."""

    num_source_classes: int
    num_clusters: int
    assignment: np.ndarray

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        k_src, k = self.num_source_classes, self.num_clusters
        if self.assignment.shape != (k_src,):
            raise ValueError(
                f"assignment shape {self.assignment.shape} != ({k_src},)"
            )
        if not 1 <= k <= k_src:
            raise ValueError(f"num_clusters {k} outside [1, {k_src}]")
        if np.any((self.assignment < 0) | (self.assignment >= k)):
            raise ValueError("cluster ids must lie in [0, num_clusters)")
        if np.unique(self.assignment).size != k:
            raise ValueError("assignment must use every cluster id at least once")

    @classmethod
    def identity(cls, num_classes: int) -> "ClusterMap":
        return cls(num_classes, num_classes, np.arange(num_classes))

    def is_identity(self) -> bool:
        return self.num_clusters == self.num_source_classes and bool(
            np.all(self.assignment == np.arange(self.num_source_classes))
        )

    def merged_names(self, source_names: list[str]) -> list[str]:
        """Join member class names per cluster, in source order."""
        if len(source_names) != self.num_source_classes:
            raise ValueError("source_names length must equal num_source_classes")
        return [
            "+".join(
                source_names[c]
                for c in range(self.num_source_classes)
                if self.assignment[c] == a
            )
            for a in range(self.num_clusters)
        ]

    def to_json_dict(self) -> dict:
        return {
            "num_source_classes": self.num_source_classes,
            "num_clusters": self.num_clusters,
            "assignment": [int(a) for a in self.assignment],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ClusterMap":
        return cls(
            int(obj["num_source_classes"]),
            int(obj["num_clusters"]),
            np.asarray(obj["assignment"], dtype=np.int64),
        )


def save_cluster_map(path: str | Path, cmap: ClusterMap) -> None:
    write_json(path, cmap.to_json_dict())


def load_cluster_map(path: str | Path) -> ClusterMap:
    return ClusterMap.from_json_dict(read_json(path))


def compose_maps(first: ClusterMap, second: ClusterMap) -> ClusterMap:
    """Map through ``first`` then ``second`` (second acts on first's clusters)."""
    if second.num_source_classes != first.num_clusters:
        raise ValueError("second map must act on first map's clusters")
    return ClusterMap(
        first.num_source_classes,
        second.num_clusters,
        second.assignment[first.assignment],
    )


def merge_confusion(conf: ConfusionMatrix, cmap: ClusterMap) -> ConfusionMatrix:
    """Collapse the matrix onto cluster ids; the total count is preserved."""
    if cmap.num_source_classes != conf.num_classes:
        raise ValueError(
            f"map covers {cmap.num_source_classes} classes, "
            f"matrix has {conf.num_classes}"
        )
    k = cmap.num_clusters
    a = cmap.assignment
    merged = np.zeros((k, k), dtype=np.int64)
    np.add.at(merged, (a[:, None], a[None, :]), conf.counts)
    names = None if conf.class_names is None else cmap.merged_names(conf.class_names)
    return ConfusionMatrix(k, merged, conf.ignore_index, names)


def remap_labels(
    labels: np.ndarray, cmap: ClusterMap, ignore_index: int = DEFAULT_IGNORE_INDEX
) -> np.ndarray:
    """Replace each label by its cluster id; ``ignore_index`` passes through."""
    labels = np.asarray(labels)
    keep = labels != ignore_index
    bad = keep & ((labels < 0) | (labels >= cmap.num_source_classes))
    if np.any(bad):
        coord = _first_bad_coordinate(bad)
        raise ValueError(f"label {int(labels[coord])} out of range at {coord}")
    out = labels.copy()
    out[keep] = cmap.assignment[labels[keep].astype(np.int64)]
    return out


def write_confusion_csv(path: str | Path, conf: ConfusionMatrix) -> None:
    """Write header of class names, then K rows of K integer counts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(conf.names)
        for row in conf.counts:
            writer.writerow([int(v) for v in row])


def read_confusion_csv(
    path: str | Path, ignore_index: int = DEFAULT_IGNORE_INDEX
) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty confusion CSV")
    names = rows[0]
    k = len(names)
    if len(rows) != k + 1:
        raise ValueError(f"{path}: expected {k} count rows, found {len(rows) - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if len(row) != k:
            raise ValueError(f"{path}: row {i} has {len(row)} columns, expected {k}")
        counts[i] = [int(v) for v in row]
    return ConfusionMatrix(k, counts, ignore_index, names)
