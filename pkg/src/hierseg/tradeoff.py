"""Per-stage accuracy-vs-class-count curves and supervision-plan selection.

For every intermediate stage the confusion matrix is clustered at each
candidate class count, the merged mIoU is evaluated, and one point per
count lands on a trade-off curve. A selector (the ratio rule, or its
angle-line generalization) picks the class count per stage; the chosen
cluster maps plus per-stage loss weights form the supervision plan that
drives hierarchical training.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ioutil import read_json, write_json
from .segmetrics import (
    ClusterMap,
    ConfusionMatrix,
    merge_confusion,
    metrics_from_confusion,
)
from .speclust import (
    class_counts_by_halving,
    manual_contiguous_map,
    spectral_cluster,
    symmetrize_affinity,
)

DEFAULT_GAMMA = 0.4


@dataclass
class TradeoffCurve:
    """Ordered (k, mIoU) points for one stage, with the map behind each point."""

    stage_id: int
    points: list[tuple[int, float]]
    maps: list[ClusterMap]

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("curve must have at least one point")
        if len(self.points) != len(self.maps):
            raise ValueError("points and maps must run in parallel")
        ks = [k for k, _ in self.points]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k values must be strictly increasing")
        for (k, miou), cmap in zip(self.points, self.maps):
            if cmap.num_clusters != k:
                raise ValueError(f"map at k={k} has {cmap.num_clusters} clusters")
            if not 0.0 <= miou <= 1.0:
                raise ValueError(f"miou {miou} at k={k} outside [0, 1]")
        if not self.maps[-1].is_identity():
            raise ValueError("last curve point must use the identity map")

    @property
    def ks(self) -> np.ndarray:
        return np.array([k for k, _ in self.points], dtype=np.int64)

    @property
    def mious(self) -> np.ndarray:
        return np.array([m for _, m in self.points], dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.points[-1][0]


@dataclass(frozen=True)
class ReferencePoint:
    """Final-output operating point the selectors aim relative to."""

    k_full: int
    miou_ref: float

    def __post_init__(self) -> None:
        if self.k_full < 2:
            raise ValueError("k_full must be >= 2")
        if not 0.0 <= self.miou_ref <= 1.0:
            raise ValueError("miou_ref must lie in [0, 1]")


@dataclass(frozen=True)
class SelectorConfig:
    """Selection rule: 'ratio', or 'theta' with an angle from the vertical.

    axis_scale gives the (per class-count, per mIoU-fraction) units used
    in theta mode; None means (1/k_full, 1), placing the reference point
    at (1, miou_ref).
    """

    mode: str = "ratio"
    theta_degrees: float = 0.0
    axis_scale: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("ratio", "theta"):
            raise ValueError(f"unknown selector mode {self.mode!r}")
        if not 0.0 <= self.theta_degrees <= 90.0:
            raise ValueError("theta_degrees must lie in [0, 90]")
        if self.axis_scale is not None:
            sx, sy = self.axis_scale
            if sx <= 0 or sy <= 0:
                raise ValueError("axis scales must be positive")


@dataclass
class PlanStage:
    """One supervised stage: its grouped label set and loss weight."""

    stage_id: int
    class_set: ClusterMap
    weight: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError("stage weight must be finite and non-negative")


@dataclass
class SupervisionPlan:
    """Intermediate stages (shallow to deep) plus the full-class final stage."""

    stages: list[PlanStage]
    final: PlanStage

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("plan needs at least one intermediate stage")
        if not self.final.class_set.is_identity():
            raise ValueError("final stage must use the identity class set")
        if self.final.weight != 1.0:
            raise ValueError("final stage weight must be 1")

    @property
    def num_classes(self) -> int:
        return self.final.class_set.num_source_classes

    @property
    def stage_class_counts(self) -> list[int]:
        return [s.class_set.num_clusters for s in self.stages]

    def to_json_dict(self) -> dict:
        entries = []
        for stage in [*self.stages, self.final]:
            entries.append(
                {
                    "stage_id": stage.stage_id,
                    "k": stage.class_set.num_clusters,
                    "gamma": stage.weight,
                    "assignment": [int(a) for a in stage.class_set.assignment],
                }
            )
        return {"stages": entries}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SupervisionPlan":
        entries = obj["stages"]
        if len(entries) < 2:
            raise ValueError("plan JSON needs intermediate and final stages")
        parsed = [
            PlanStage(
                int(e["stage_id"]),
                ClusterMap(len(e["assignment"]), int(e["k"]), np.asarray(e["assignment"])),
                float(e["gamma"]),
            )
            for e in entries
        ]
        return cls(parsed[:-1], parsed[-1])


def save_plan(path: str | Path, plan: SupervisionPlan) -> None:
    write_json(path, plan.to_json_dict())


def load_plan(path: str | Path) -> SupervisionPlan:
    return SupervisionPlan.from_json_dict(read_json(path))


def identity_plan(
    num_classes: int, num_stages: int, gamma: float = DEFAULT_GAMMA
) -> SupervisionPlan:
    """Plain deep supervision: every stage keeps the full class set."""
    stages = [
        PlanStage(i + 1, ClusterMap.identity(num_classes), gamma)
        for i in range(num_stages)
    ]
    final = PlanStage(num_stages + 1, ClusterMap.identity(num_classes), 1.0)
    return SupervisionPlan(stages, final)


def resolve_gammas(
    gammas: float | Sequence[float] | None, num_stages: int
) -> list[float]:
    """Normalize a scalar, per-stage list, or None into one weight per stage."""
    if gammas is None:
        return [DEFAULT_GAMMA] * num_stages
    if isinstance(gammas, (int, float)):
        return [float(gammas)] * num_stages
    weights = [float(g) for g in gammas]
    if len(weights) != num_stages:
        raise ValueError(f"got {len(weights)} gammas for {num_stages} stages")
    return weights


def manual_plan(
    num_classes: int,
    num_stages: int,
    gammas: float | Sequence[float] | None = None,
) -> SupervisionPlan:
    """Selector-free plan: contiguous groups with class counts halved per stage."""
    counts = class_counts_by_halving(num_classes, num_stages)
    weights = resolve_gammas(gammas, num_stages)
    stages = [
        PlanStage(i + 1, manual_contiguous_map(num_classes, counts[i]), weights[i])
        for i in range(num_stages)
    ]
    final = PlanStage(num_stages + 1, ClusterMap.identity(num_classes), 1.0)
    return SupervisionPlan(stages, final)


def build_tradeoff_curve(
    conf_stage: ConfusionMatrix,
    seed: int,
    stage_id: int = 1,
    row_normalize: bool = True,
    cluster_fn: Callable[[int], ClusterMap] | None = None,
) -> TradeoffCurve:
    """Evaluate merged mIoU at every class count from 2 up to K.

    Counts 2..K-1 come from ``cluster_fn`` (by default spectral clustering
    of this stage's symmetrized confusion affinity); the K point is the
    stage's own unmerged mIoU under the identity map.
    """
    k_full = conf_stage.num_classes
    if k_full < 3:
        raise ValueError("need at least 3 classes to build a curve")
    if conf_stage.total == 0:
        raise ValueError("confusion matrix is all zero")
    if cluster_fn is None:
        aff = symmetrize_affinity(conf_stage, row_normalize=row_normalize)
        cluster_fn = lambda k: spectral_cluster(aff, k, seed)  # noqa: E731

    points: list[tuple[int, float]] = []
    maps: list[ClusterMap] = []
    for k in range(2, k_full):
        cmap = cluster_fn(k)
        points.append((k, metrics_from_confusion(merge_confusion(conf_stage, cmap)).miou))
        maps.append(cmap)
    points.append((k_full, metrics_from_confusion(conf_stage).miou))
    maps.append(ClusterMap.identity(k_full))
    return TradeoffCurve(stage_id, points, maps)


def build_stage_curves(
    confusions: Sequence[ConfusionMatrix],
    seed: int,
    row_normalize: bool = True,
    cluster_fns: Sequence[Callable[[int], ClusterMap] | None] | None = None,
) -> list[TradeoffCurve]:
    """One curve per intermediate stage, stage ids counted from 1."""
    if not confusions:
        raise ValueError("need at least one intermediate stage")
    curves = []
    for i, conf in enumerate(confusions):
        fn = cluster_fns[i] if cluster_fns is not None else None
        try:
            curves.append(
                build_tradeoff_curve(
                    conf, seed, stage_id=i + 1, row_normalize=row_normalize, cluster_fn=fn
                )
            )
        except ValueError as err:
            raise ValueError(f"stage {i + 1}: {err}") from err
    return curves


def select_by_ratio(
    curve: TradeoffCurve, ref: ReferencePoint
) -> tuple[int, ClusterMap]:
    """Pick the point whose mIoU/k is closest to the reference ratio.

    Ties go to the larger class count (the harder task).
    """
    target = ref.miou_ref / ref.k_full
    best_k, best_map, best_dist = None, None, math.inf
    for (k, miou), cmap in zip(curve.points, curve.maps):
        dist = abs(miou / k - target)
        if dist <= best_dist:
            best_k, best_map, best_dist = k, cmap, dist
    assert best_k is not None and best_map is not None
    return best_k, best_map


def _snap_to_grid(curve: TradeoffCurve, k_star: float) -> tuple[int, ClusterMap]:
    # Nearest curve point; equidistant cases take the larger k.
    best_k, best_map, best_dist = None, None, math.inf
    for (k, _), cmap in zip(curve.points, curve.maps):
        dist = abs(k - k_star)
        if dist <= best_dist:
            best_k, best_map, best_dist = k, cmap, dist
    assert best_k is not None and best_map is not None
    return best_k, best_map


def select_by_theta(
    curve: TradeoffCurve, ref: ReferencePoint, cfg: SelectorConfig
) -> tuple[int, ClusterMap]:
    """Intersect the angled selector line with the curve and snap to the grid.

    The line passes through the scaled reference point; at 0 degrees it is
    vertical (always selecting the full class count), rotating toward the
    origin side until at 90 degrees it is the horizontal through the
    reference mIoU. With several crossings the one nearest the reference
    (largest abscissa) wins. A line that misses the curve entirely clamps
    to the nearer endpoint and emits a warning.
    """
    if cfg.mode != "theta":
        raise ValueError("selector config must be in theta mode")
    if cfg.theta_degrees == 0.0:
        return curve.points[-1][0], curve.maps[-1]

    s_x, s_y = cfg.axis_scale if cfg.axis_scale is not None else (1.0 / ref.k_full, 1.0)
    xs = curve.ks.astype(np.float64) * s_x
    ys = curve.mious * s_y
    x_ref, y_ref = ref.k_full * s_x, ref.miou_ref * s_y
    if cfg.theta_degrees == 90.0:
        slope = 0.0
    else:
        rad = math.radians(cfg.theta_degrees)
        slope = math.cos(rad) / math.sin(rad)

    gap = ys - (y_ref + slope * (xs - x_ref))
    hits: list[float] = [float(x) for x, g in zip(xs, gap) if g == 0.0]
    for j in range(len(xs) - 1):
        if gap[j] * gap[j + 1] < 0.0:
            t = gap[j] / (gap[j] - gap[j + 1])
            hits.append(float(xs[j] + t * (xs[j + 1] - xs[j])))

    if not hits:
        clamp_last = abs(gap[-1]) <= abs(gap[0])
        idx = len(curve.points) - 1 if clamp_last else 0
        k_clamp = curve.points[idx][0]
        warnings.warn(
            f"selector line misses the trade-off curve; clamped to k={k_clamp}",
            stacklevel=2,
        )
        return k_clamp, curve.maps[idx]

    k_star = max(hits) / s_x
    return _snap_to_grid(curve, k_star)


def select_stage_classes(
    curve: TradeoffCurve, ref: ReferencePoint, cfg: SelectorConfig
) -> tuple[int, ClusterMap]:
    if cfg.mode == "ratio":
        return select_by_ratio(curve, ref)
    return select_by_theta(curve, ref, cfg)


def derive_supervision_plan(
    confusions: Sequence[ConfusionMatrix],
    final_conf: ConfusionMatrix,
    cfg: SelectorConfig,
    gammas: float | Sequence[float] | None = None,
    seed: int = 0,
    row_normalize: bool = True,
    cluster_fns: Sequence[Callable[[int], ClusterMap] | None] | None = None,
) -> SupervisionPlan:
    """Build every stage curve, select its class set, and attach weights.

    Stage class sets are selected independently against the shared final
    reference point, so equally sized sets may still group different
    classes on different stages.
    """
    curves = build_stage_curves(confusions, seed, row_normalize, cluster_fns)
    return plan_from_curves(curves, reference_from_confusion(final_conf), cfg, gammas)


def reference_from_confusion(final_conf: ConfusionMatrix) -> ReferencePoint:
    miou = metrics_from_confusion(final_conf).miou
    if math.isnan(miou):
        raise ValueError("final confusion matrix has no defined classes")
    return ReferencePoint(final_conf.num_classes, miou)


def plan_from_curves(
    curves: Sequence[TradeoffCurve],
    ref: ReferencePoint,
    cfg: SelectorConfig,
    gammas: float | Sequence[float] | None = None,
) -> SupervisionPlan:
    n = len(curves)
    weights = resolve_gammas(gammas, n)
    stages = []
    for curve, weight in zip(curves, weights):
        try:
            _, cmap = select_stage_classes(curve, ref, cfg)
        except ValueError as err:
            raise ValueError(f"stage {curve.stage_id}: {err}") from err
        stages.append(PlanStage(curve.stage_id, cmap, weight))
    final = PlanStage(n + 1, ClusterMap.identity(ref.k_full), 1.0)
    return SupervisionPlan(stages, final)


def write_curves_csv(path: str | Path, curves: Sequence[TradeoffCurve]) -> None:
    """Rows of (stage, k, miou), sorted by stage then k; floats via repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "k", "miou"])
        for curve in sorted(curves, key=lambda c: c.stage_id):
            for k, miou in curve.points:
                writer.writerow([curve.stage_id, k, repr(float(miou))])


def read_curves_csv(path: str | Path) -> list[tuple[int, int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["stage", "k", "miou"]:
        raise ValueError(f"{path}: missing 'stage,k,miou' header")
    return [(int(s), int(k), float(m)) for s, k, m in rows[1:]]
