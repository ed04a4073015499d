"""Class clustering engines for confusion-driven label grouping.

Three routes produce a ClusterMap over the original classes: spectral
clustering on the symmetrized confusion affinity, k-means on exported
class embeddings, and deterministic contiguous halving. The symmetric
eigensolver used by the spectral route is a cyclic Jacobi iteration
implemented here, so the whole pipeline has no linear-algebra
dependencies beyond dense numpy arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .segmetrics import ClusterMap, ConfusionMatrix, default_class_names
from .seeding import stream

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100
KMEANS_REL_TOL = 1e-9
JACOBI_MAX_SWEEPS = 100
JACOBI_OFF_TOL = 1e-12
JACOBI_SKIP_TOL = 1e-16


@dataclass
class AffinityMatrix:
    """Symmetric non-negative class-to-class confusion weights.

    The diagonal is zero under the default construction; keep_diagonal
    mode retains symmetrized self-counts (a documented deviation knob).
    """

    size: int
    weights: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.size, self.size):
            raise ValueError(
                f"weights shape {self.weights.shape} != ({self.size}, {self.size})"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("affinity weights must be finite")
        if np.any(self.weights < 0):
            raise ValueError("affinity weights must be non-negative")
        if not np.array_equal(self.weights, self.weights.T):
            raise ValueError("affinity weights must be exactly symmetric")
        if self.class_names is not None and len(self.class_names) != self.size:
            raise ValueError("class_names length must equal size")

    @property
    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return default_class_names(self.size)


def symmetrize_affinity(
    conf: ConfusionMatrix, row_normalize: bool = True, keep_diagonal: bool = False
) -> AffinityMatrix:
    """Build A = (C + C^T) / 2 from a confusion matrix.

    With row_normalize (the default) each row of counts is divided by its
    row sum first, removing class-frequency bias; zero rows stay zero.
    The diagonal is forced to zero unless keep_diagonal is set, because
    self-confusion counts would otherwise dominate every degree.
    """
    if conf.num_classes < 2:
        raise ValueError("need at least 2 classes to build an affinity")
    c = conf.counts.astype(np.float64)
    if row_normalize:
        sums = c.sum(axis=1, keepdims=True)
        c = np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)
    a = (c + c.T) / 2.0
    if not keep_diagonal:
        np.fill_diagonal(a, 0.0)
    return AffinityMatrix(conf.num_classes, a, conf.class_names)


def write_affinity_csv(path: str | Path, aff: AffinityMatrix) -> None:
    """Same layout as the confusion CSV, with real-valued entries."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(aff.names)
        for row in aff.weights:
            writer.writerow([repr(float(v)) for v in row])


def read_affinity_csv(path: str | Path) -> AffinityMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty affinity CSV")
    names = rows[0]
    k = len(names)
    if len(rows) != k + 1:
        raise ValueError(f"{path}: expected {k} weight rows, found {len(rows) - 1}")
    weights = np.zeros((k, k), dtype=np.float64)
    for i, row in enumerate(rows[1:]):
        if len(row) != k:
            raise ValueError(f"{path}: row {i} has {len(row)} columns, expected {k}")
        weights[i] = [float(v) for v in row]
    return AffinityMatrix(k, weights, names)


def symmetric_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns. Sweeps stop once the off-diagonal Frobenius
    norm falls below 1e-12 of the matrix norm (or after 100 sweeps).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    fro = float(np.linalg.norm(m))
    if float(np.max(np.abs(m - m.T), initial=0.0)) > JACOBI_OFF_TOL * max(fro, 1.0):
        raise ValueError("matrix is not symmetric")

    n = m.shape[0]
    a = (m + m.T) / 2.0
    v = np.eye(n)
    if n == 1 or fro == 0.0:
        return np.diag(a).copy(), v

    skip = JACOBI_SKIP_TOL * fro
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(JACOBI_MAX_SWEEPS):
        # Summing off-diagonal squares directly avoids the catastrophic
        # cancellation of the full-norm-minus-diagonal form.
        off = math.sqrt(float((a[off_mask] ** 2).sum()))
        if off <= JACOBI_OFF_TOL * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.hypot(theta, 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                ap, aq = a[p].copy(), a[q].copy()
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[p] = new_p
                a[:, p] = new_p
                a[q] = new_q
                a[:, q] = new_q
                # Exact pivot-block values keep rounding out of the diagonal.
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order].copy(), v[:, order].copy()


def normalized_laplacian(aff: AffinityMatrix) -> np.ndarray:
    """L = I - D^(-1/2) A D^(-1/2); isolated vertices get a bare 1 on the diagonal."""
    d = aff.weights.sum(axis=1)
    dinv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    lap = np.eye(aff.size) - aff.weights * dinv[:, None] * dinv[None, :]
    return (lap + lap.T) / 2.0


@dataclass
class SpectralEmbedding:
    """Row-normalized k smallest-eigenvalue eigenvectors, one row per class."""

    points: np.ndarray
    source_k: int

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != self.source_k:
            raise ValueError("points must be K x source_k")


def spectral_embedding(aff: AffinityMatrix, k: int) -> SpectralEmbedding:
    """Embed classes as row-normalized entries of the k bottom eigenvectors."""
    _, vecs = symmetric_eig(normalized_laplacian(aff))
    points = vecs[:, :k].copy()
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    points = np.divide(points, norms, out=np.zeros_like(points), where=norms > 0)
    return SpectralEmbedding(points, k)


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss: float
    wcss_history: list[float]
    restart: int


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _fill_empty_clusters(
    labels: np.ndarray, d2: np.ndarray, k: int
) -> np.ndarray:
    # Hand the farthest member of the largest cluster to each empty id.
    # Works even when every point coincides (distances all zero).
    for empty in range(k):
        sizes = np.bincount(labels, minlength=k)
        if sizes[empty] > 0:
            continue
        donor = int(np.argmax(sizes))
        members = np.flatnonzero(labels == donor)
        pick = members[int(np.argmax(d2[members, donor]))]
        labels[pick] = empty
    return labels


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator) -> KMeansResult:
    centers = _plus_plus_init(points, k, rng)
    labels = np.zeros(points.shape[0], dtype=np.int64)
    history: list[float] = []
    prev = math.inf
    for _ in range(KMEANS_MAX_ITER):
        d2 = _squared_distances(points, centers)
        labels = d2.argmin(axis=1).astype(np.int64)
        labels = _fill_empty_clusters(labels, d2, k)

        centers = np.zeros((k, points.shape[1]), dtype=np.float64)
        np.add.at(centers, labels, points)
        centers /= np.bincount(labels, minlength=k)[:, None]

        wcss = float(((points - centers[labels]) ** 2).sum())
        history.append(wcss)
        if prev - wcss <= KMEANS_REL_TOL * max(prev, 1e-300):
            break
        prev = wcss
    return KMeansResult(labels, centers, history[-1], history, 0)


def kmeans_fit(points: np.ndarray, k: int, seed: int) -> KMeansResult:
    """Best of several seeded Lloyd runs; ties keep the lowest restart index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")

    best: KMeansResult | None = None
    for r in range(KMEANS_RESTARTS):
        run = _lloyd(points, k, stream(seed, "kmeans", r))
        if best is None or run.wcss < best.wcss:
            best = KMeansResult(run.labels, run.centers, run.wcss, run.wcss_history, r)
    assert best is not None
    return best


def kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Cluster rows of ``points`` into k groups; returns the label vector."""
    return kmeans_fit(points, k, seed).labels


def spectral_cluster(aff: AffinityMatrix, k: int, seed: int) -> ClusterMap:
    """Normalized-cut style clustering of classes from confusion affinity.

    Pipeline: normalized Laplacian, k bottom eigenvectors, row
    normalization, then seeded k-means on the embedded classes.
    """
    if not 2 <= k <= aff.size:
        raise ValueError(f"k={k} outside [2, {aff.size}]")
    emb = spectral_embedding(aff, k)
    labels = kmeans(emb.points, k, seed)
    return ClusterMap(aff.size, k, labels)


@dataclass
class ClassEmbeddingSet:
    """One embedding vector per class, e.g. mean head features per class."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d array")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embeddings must be finite")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


def cluster_embeddings(emb: ClassEmbeddingSet, k: int, seed: int) -> ClusterMap:
    """k-means over class embedding vectors, wrapped as a ClusterMap."""
    if not 2 <= k <= emb.num_classes:
        raise ValueError(f"k={k} outside [2, {emb.num_classes}]")
    labels = kmeans(emb.vectors, k, seed)
    return ClusterMap(emb.num_classes, k, labels)


def class_counts_by_halving(num_classes: int, num_stages: int) -> list[int]:
    """Stage class counts by repeated ceil-halving from the full set.

    The last intermediate stage gets ceil(K/2) classes and each earlier
    stage half of the next one, never dropping below 2.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    counts = [0] * num_stages
    counts[num_stages - 1] = max(2, (num_classes + 1) // 2)
    for i in range(num_stages - 2, -1, -1):
        counts[i] = max(2, (counts[i + 1] + 1) // 2)
    return counts


def manual_contiguous_map(num_classes: int, k: int) -> ClusterMap:
    """Hand-crafted fallback grouping: k contiguous, near-equal id ranges."""
    if not 1 <= k <= num_classes:
        raise ValueError(f"k={k} outside [1, {num_classes}]")
    assignment = np.zeros(num_classes, dtype=np.int64)
    for group, ids in enumerate(np.array_split(np.arange(num_classes), k)):
        assignment[ids] = group
    return ClusterMap(num_classes, k, assignment)


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Chance-corrected agreement between two label vectors, in [-1, 1]."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("label vectors must have the same length")
    n = a.size
    if n == 0:
        raise ValueError("label vectors must be non-empty")

    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x: np.ndarray) -> float:
        x = x.astype(np.float64)
        return float((x * (x - 1) / 2).sum())

    index = comb2(table)
    sum_a = comb2(table.sum(axis=1))
    sum_b = comb2(table.sum(axis=0))
    pairs = n * (n - 1) / 2
    expected = sum_a * sum_b / pairs if pairs > 0 else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
