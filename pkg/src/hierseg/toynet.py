"""Small convolutional segmentation network with per-stage heads.

The network is a stack of [conv3x3 -> bias -> relu -> average-pool]
stages. Every stage feeds a 1x1-conv head whose logits are upsampled to
label resolution, so shallow stages can be supervised directly. The
total loss is the final head's cross-entropy plus weighted auxiliary
terms, each computed against labels remapped through that stage's class
grouping.

Also provided: SGD with momentum, the training loop, confusion-based
evaluation, a central-finite-difference gradient checker, binary
checkpoints, training-history CSV, and the two-phase pipeline that
first trains a fully supervised network to measure per-stage confusion,
derives a supervision plan from it, and then retrains from scratch.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    avg_pool,
    backward,
    conv2d,
    mul_scalar,
    relu,
    resize_nearest,
    softmax_cross_entropy,
)
from .segmetrics import (
    DEFAULT_IGNORE_INDEX,
    ClusterMap,
    ConfusionMatrix,
    accumulate,
    metrics_from_confusion,
    remap_labels,
)
from .seeding import stream
from .speclust import (
    ClassEmbeddingSet,
    cluster_embeddings,
    manual_contiguous_map,
)
from .tradeoff import (
    DEFAULT_GAMMA,
    SelectorConfig,
    SupervisionPlan,
    TradeoffCurve,
    build_stage_curves,
    identity_plan,
    manual_plan,
    plan_from_curves,
    reference_from_confusion,
)

CHECKPOINT_MAGIC = b"HSCP"
CHECKPOINT_VERSION = 1

CLUSTERING_MODES = ("spectral", "kmeans", "manual")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; the last stage is the final one."""

    head_counts: tuple[int, ...]
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 32)
    pool_factors: tuple[int, ...] = (2, 2, 2)
    kernel_size: int = 3
    activation: str = "relu"

    def __post_init__(self) -> None:
        n = len(self.stage_channels)
        if n < 2:
            raise ValueError("need at least one intermediate stage plus the final")
        if len(self.pool_factors) != n or len(self.head_counts) != n:
            raise ValueError("stage_channels, pool_factors, head_counts must align")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage channels must be monotone non-decreasing")
        if any(f < 1 for f in self.pool_factors):
            raise ValueError("pool factors must be >= 1")
        if any(h < 2 for h in self.head_counts):
            raise ValueError("every head needs at least 2 classes")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd and positive")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def num_intermediate(self) -> int:
        return self.num_stages - 1

    @property
    def num_classes(self) -> int:
        return self.head_counts[-1]

    @property
    def total_downsample(self) -> int:
        return int(np.prod(self.pool_factors))

    def to_json_dict(self) -> dict:
        return {
            "head_counts": list(self.head_counts),
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "pool_factors": list(self.pool_factors),
            "kernel_size": self.kernel_size,
            "activation": self.activation,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "NetworkConfig":
        return cls(
            head_counts=tuple(int(v) for v in obj["head_counts"]),
            in_channels=int(obj["in_channels"]),
            stage_channels=tuple(int(v) for v in obj["stage_channels"]),
            pool_factors=tuple(int(v) for v in obj["pool_factors"]),
            kernel_size=int(obj["kernel_size"]),
            activation=str(obj["activation"]),
        )


def network_config_for_plan(base: NetworkConfig, plan: SupervisionPlan) -> NetworkConfig:
    """Head counts from the plan's groupings; the final head keeps K."""
    if len(plan.stages) != base.num_intermediate:
        raise ValueError(
            f"plan has {len(plan.stages)} intermediate stages, "
            f"network has {base.num_intermediate}"
        )
    counts = tuple(plan.stage_class_counts) + (plan.num_classes,)
    return dataclasses.replace(base, head_counts=counts)


@dataclass(eq=False)
class StageOutputs:
    """Per-stage tensors from one forward pass.

    ``stage_logits`` are upsampled to label resolution (one entry per
    stage, final last); ``coarse_logits`` are the same heads before
    upsampling; ``features`` the pooled stage outputs feeding each head;
    ``preacts`` the conv outputs before the nonlinearity, kept so the
    gradient checker can verify no activation sits on its kink.
    """

    stage_logits: list[Tensor]
    coarse_logits: list[Tensor]
    features: list[Tensor]
    preacts: list[Tensor]

    @property
    def final_logits(self) -> Tensor:
        return self.stage_logits[-1]


class SegNet:
    """Parameter container plus forward pass for the staged network."""

    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        self.params: dict[str, Tensor] = {}
        layer = 0
        in_ch = config.in_channels
        k = config.kernel_size
        for i, out_ch in enumerate(config.stage_channels):
            self._add_conv(f"stage{i + 1}.conv", (out_ch, in_ch, k, k), seed, layer)
            layer += 1
            head = config.head_counts[i]
            self._add_conv(f"head{i + 1}", (head, out_ch, 1, 1), seed, layer)
            layer += 1
            in_ch = out_ch

    def _add_conv(self, name: str, shape: tuple[int, ...], seed: int, layer: int) -> None:
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        rng = stream(seed, "init", layer)
        self.params[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, size=shape), name=f"{name}.w"
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(shape[0]), name=f"{name}.b")

    def forward(self, images: np.ndarray) -> StageOutputs:
        """images: (B, H, W, in_channels) floats in [0, 1]."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[3] != self.config.in_channels:
            raise ValueError(
                f"expected (B, H, W, {self.config.in_channels}) images, "
                f"got {images.shape}"
            )
        height, width = images.shape[1], images.shape[2]
        total = self.config.total_downsample
        if height % total or width % total:
            raise ValueError(
                f"spatial dims {height}x{width} not divisible by downsample {total}"
            )

        x = Tensor(images.transpose(0, 3, 1, 2))
        stage_logits: list[Tensor] = []
        coarse_logits: list[Tensor] = []
        features: list[Tensor] = []
        preacts: list[Tensor] = []
        cumulative = 1
        for i in range(self.config.num_stages):
            z = conv2d(
                x, self.params[f"stage{i + 1}.conv.w"], self.params[f"stage{i + 1}.conv.b"]
            )
            preacts.append(z)
            a = relu(z) if self.config.activation == "relu" else z
            x = avg_pool(a, self.config.pool_factors[i])
            features.append(x)
            cumulative *= self.config.pool_factors[i]
            logits = conv2d(x, self.params[f"head{i + 1}.w"], self.params[f"head{i + 1}.b"])
            coarse_logits.append(logits)
            stage_logits.append(resize_nearest(logits, cumulative))
        return StageOutputs(stage_logits, coarse_logits, features, preacts)

    def count_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def cross_entropy_remapped(
    logits: Tensor,
    labels: np.ndarray,
    class_set: ClusterMap | None = None,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
) -> Tensor:
    """Cross-entropy against labels remapped through a class grouping.

    With no grouping the labels are used as-is. A batch where every
    pixel is ignored contributes an exact 0 (with a warning, since it
    usually signals a data problem).
    """
    if class_set is not None:
        labels = remap_labels(labels, class_set, ignore_index)
    labels = np.asarray(labels)
    if np.all(labels == ignore_index):
        warnings.warn("all pixels ignored in loss batch", stacklevel=2)
    return softmax_cross_entropy(logits, labels, ignore_index)


def hierarchical_loss(
    outputs: StageOutputs,
    labels: np.ndarray,
    plan: SupervisionPlan | None,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
) -> tuple[Tensor, list[float]]:
    """Final cross-entropy plus weighted per-stage auxiliary terms.

    Returns the total loss tensor and the raw (unweighted) per-stage
    losses for logging. ``plan=None`` supervises only the final head.
    The total starts from the final term, so a plan with all-zero
    weights reproduces the plan-free loss bit for bit.
    """
    total = cross_entropy_remapped(outputs.stage_logits[-1], labels, None, ignore_index)
    if plan is None:
        return total, []
    if len(plan.stages) != len(outputs.stage_logits) - 1:
        raise ValueError(
            f"plan has {len(plan.stages)} intermediate stages, "
            f"network produced {len(outputs.stage_logits) - 1}"
        )
    stage_values: list[float] = []
    for cfg, logits in zip(plan.stages, outputs.stage_logits[:-1]):
        if logits.shape[1] != cfg.class_set.num_clusters:
            raise ValueError(
                f"stage {cfg.stage_id} head emits {logits.shape[1]} classes, "
                f"plan groups into {cfg.class_set.num_clusters}"
            )
        ce = cross_entropy_remapped(logits, labels, cfg.class_set, ignore_index)
        stage_values.append(float(ce.data))
        total = add(total, mul_scalar(ce, cfg.weight))
    return total, stage_values


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    ignore_index: int = DEFAULT_IGNORE_INDEX
    divergence_threshold: float = 50.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError("learning rate must be finite and >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence threshold must be positive")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
            "ignore_index": self.ignore_index,
            "divergence_threshold": self.divergence_threshold,
        }


class SgdOptimizer:
    """SGD with classical momentum: v = m*v + g; p -= lr*v."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float, momentum: float):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        for name, t in self.params.items():
            grad = t.grad
            if grad is None:
                grad = np.zeros_like(t.data)
            elif not np.all(np.isfinite(grad)):
                raise RuntimeError(f"non-finite gradient in {name}")
            v = self.velocity[name]
            v *= self.momentum
            v += grad
            t.data -= self.learning_rate * v


@dataclass(frozen=True)
class EpochStats:
    """Batch-mean losses for one epoch; val_miou is NaN when unmeasured."""

    epoch: int
    total_loss: float
    stage_losses: tuple[float, ...]
    val_miou: float


def train(
    images: np.ndarray,
    labels: np.ndarray,
    plan: SupervisionPlan | None,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    net: SegNet | None = None,
) -> tuple[SegNet, list[EpochStats]]:
    """Minibatch SGD over shuffled epochs.

    A fresh network is initialized from the training seed unless one is
    passed in (warm starts, fused variants). Losses in the history are
    means over the epoch's batches; raw stage losses are logged before
    weighting. Aborts with an error naming the epoch when the loss goes
    non-finite or beyond the divergence threshold.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or labels.ndim != 3 or images.shape[:3] != labels.shape:
        raise ValueError(
            f"images {images.shape} and labels {labels.shape} do not align"
        )
    if net is None:
        net = SegNet(net_cfg, cfg.seed)
    optimizer = SgdOptimizer(net.params, cfg.learning_rate, cfg.momentum)
    count = images.shape[0]
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(count)
        batch_totals: list[float] = []
        batch_stages: list[list[float]] = []
        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            outputs = net.forward(images[idx])
            total, stage_values = hierarchical_loss(
                outputs, labels[idx], plan, cfg.ignore_index
            )
            value = float(total.data)
            if not math.isfinite(value) or value > cfg.divergence_threshold:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: total loss {value}"
                )
            optimizer.zero_grad()
            backward(total)
            optimizer.step()
            batch_totals.append(value)
            batch_stages.append(stage_values)
        mean_total = float(np.mean(batch_totals))
        if plan is None:
            mean_stages: tuple[float, ...] = ()
        else:
            mean_stages = tuple(float(v) for v in np.mean(batch_stages, axis=0))
        val_miou = math.nan
        if val is not None:
            val_miou = metrics_from_confusion(
                evaluate(net, val[0], val[1], ignore_index=cfg.ignore_index)
            ).miou
        history.append(EpochStats(epoch, mean_total, mean_stages, val_miou))
    return net, history


def predict(net: SegNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Final-head argmax labels, shape (B, H, W), dtype int64."""
    images = np.asarray(images)
    out = np.empty(images.shape[:3], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        logits = net.forward(chunk).final_logits.data
        out[start : start + chunk.shape[0]] = logits.argmax(axis=1)
    return out


def evaluate(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    batch_size: int = 32,
) -> ConfusionMatrix:
    """Confusion matrix of final-head predictions over a dataset."""
    conf = ConfusionMatrix.empty(net.config.num_classes, ignore_index)
    preds = predict(net, images, batch_size)
    accumulate(conf, labels, preds)
    return conf


def stage_confusions(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    batch_size: int = 32,
) -> list[ConfusionMatrix]:
    """One confusion matrix per stage head (final last).

    Each head's upsampled argmax is compared against the labels, which
    must live in that head's class space; this is meant for networks
    whose heads all emit the full class set.
    """
    confs = [
        ConfusionMatrix.empty(c, ignore_index) for c in net.config.head_counts
    ]
    images = np.asarray(images)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        chunk_labels = labels[start : start + chunk.shape[0]]
        outputs = net.forward(chunk)
        for conf, logits in zip(confs, outputs.stage_logits):
            accumulate(conf, chunk_labels, logits.data.argmax(axis=1))
    return confs


def class_feature_embeddings(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    stage_index: int,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    batch_size: int = 32,
) -> ClassEmbeddingSet:
    """Mean stage features per ground-truth class.

    Stage features are repeated back to label resolution so each pixel
    votes with its class; classes absent from the labels embed at the
    origin.
    """
    num_classes = net.config.num_classes
    width = net.config.stage_channels[stage_index]
    sums = np.zeros((num_classes, width))
    counts = np.zeros(num_classes)
    images = np.asarray(images)
    factor = int(np.prod(net.config.pool_factors[: stage_index + 1]))
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        chunk_labels = np.asarray(labels[start : start + chunk.shape[0]])
        feats = net.forward(chunk).features[stage_index].data
        full = feats.repeat(factor, axis=2).repeat(factor, axis=3)
        for c in range(num_classes):
            mask = chunk_labels == c
            if np.any(mask):
                sums[c] += full.transpose(0, 2, 3, 1)[mask].sum(axis=0)
                counts[c] += mask.sum()
    present = counts > 0
    sums[present] /= counts[present, None]
    return ClassEmbeddingSet(sums)


def grad_check(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    plan: SupervisionPlan | None = None,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    eps: float = 1e-5,
    coords_per_layer: int = 200,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    Relative error uses max(1, |analytic|, |numeric|) as denominator.
    Inputs are jittered until every pre-activation clears 10*eps, so no
    ReLU sits close enough to its kink for the finite-difference stencil
    to cross it.
    """
    images = np.asarray(images, dtype=np.float64).copy()
    for attempt in range(50):
        outputs = net.forward(images)
        margin = min(float(np.abs(z.data).min()) for z in outputs.preacts)
        if margin > 10.0 * eps:
            break
        jitter = stream(seed, "gradcheck", 1 + attempt)
        images += jitter.uniform(-1e-3, 1e-3, size=images.shape)
    else:
        raise RuntimeError("could not move pre-activations away from zero")

    def loss_value() -> float:
        out = net.forward(images)
        total, _ = hierarchical_loss(out, labels, plan, ignore_index)
        return float(total.data)

    total, _ = hierarchical_loss(outputs, labels, plan, ignore_index)
    for t in net.params.values():
        t.grad = None
    backward(total)

    worst = 0.0
    for layer_index, (name, t) in enumerate(net.params.items()):
        rng = stream(seed, "gradcheck", 0, layer_index)
        n_coords = min(coords_per_layer, t.size)
        coords = rng.choice(t.size, size=n_coords, replace=False)
        flat = t.data.reshape(-1)
        # a parameter outside the loss graph has gradient zero; the
        # numeric side below will flag it if that is wrong
        grad_flat = (
            t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        )
        for c in coords:
            c = int(c)
            saved = flat[c]
            flat[c] = saved + eps
            up = loss_value()
            flat[c] = saved - eps
            down = loss_value()
            flat[c] = saved
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grad_flat[c])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
    return worst


def write_history_csv(path: str | Path, history: Sequence[EpochStats]) -> None:
    """Header plus one row per epoch; stage columns only when present."""
    import csv

    if not history:
        raise ValueError("history is empty")
    n_stages = len(history[0].stage_losses)
    if any(len(h.stage_losses) != n_stages for h in history):
        raise ValueError("inconsistent stage-loss arity across epochs")
    header = ["epoch", "total_loss"]
    header += [f"stage_loss_{i + 1}" for i in range(n_stages)]
    header += ["val_miou"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for h in history:
            row = [str(h.epoch), repr(h.total_loss)]
            row += [repr(v) for v in h.stage_losses]
            row += [repr(h.val_miou)]
            writer.writerow(row)


def read_history_csv(path: str | Path) -> list[EpochStats]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty history file")
    header = rows[0]
    if header[:2] != ["epoch", "total_loss"] or header[-1] != "val_miou":
        raise ValueError("unrecognized history header")
    n_stages = len(header) - 3
    out = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise ValueError("history row width does not match header")
        out.append(
            EpochStats(
                int(row[0]),
                float(row[1]),
                tuple(float(v) for v in row[2 : 2 + n_stages]),
                float(row[-1]),
            )
        )
    return out


def _write_tensor(fh, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def save_checkpoint(path: str | Path, net, meta: dict | None = None) -> None:
    """Versioned binary dump: header, JSON meta, named float64 tensors.

    Works for plain and fused networks; the meta block records which,
    plus everything needed to rebuild the object before loading weights.
    """
    from .ocrfuse import FusedSegNet  # deferred to avoid an import cycle

    if isinstance(net, FusedSegNet):
        kind = "fused"
        config = net.base.config.to_json_dict()
        fuse = net.plan.to_json_dict()
    elif isinstance(net, SegNet):
        kind = "segnet"
        config = net.config.to_json_dict()
        fuse = None
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    header = {
        "kind": kind,
        "network": config,
        "fuse": fuse,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(net.params)))
        for name, tensor in net.params.items():
            _write_tensor(fh, name, tensor.data)


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ValueError("checkpoint truncated")
    return data


def load_checkpoint(path: str | Path):
    """Rebuild the network and return (net, meta dict)."""
    from .ocrfuse import FusedSegNet, FusePlan, attach_fuse

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        config = NetworkConfig.from_json_dict(header["network"])
        net = SegNet(config, seed=0)
        if header["kind"] == "fused":
            net = attach_fuse(net, FusePlan.from_json_dict(header["fuse"]), seed=0)
        elif header["kind"] != "segnet":
            raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        if n_params != len(net.params):
            raise ValueError(
                f"checkpoint has {n_params} tensors, network wants {len(net.params)}"
            )
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            data = np.frombuffer(
                _read_exact(fh, 8 * int(np.prod(shape))), dtype="<f8"
            ).reshape(shape)
            if name not in net.params:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            if net.params[name].data.shape != data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            net.params[name].data = data.astype(np.float64).copy()
    return net, header["meta"]


@dataclass(eq=False)
class TwoPhaseResult:
    """Everything produced by the two-phase run, for inspection and IO."""

    net: SegNet
    plan: SupervisionPlan
    curves: list[TradeoffCurve]
    analysis_confusions: list[ConfusionMatrix]
    phase1_history: list[EpochStats]
    phase2_history: list[EpochStats]


def derive_plan_from_phase1(
    net: SegNet,
    analysis_images: np.ndarray,
    analysis_labels: np.ndarray,
    selector: SelectorConfig,
    gammas: float | Sequence[float] | None = None,
    clustering: str = "spectral",
    seed: int = 0,
    row_normalize: bool = True,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
) -> tuple[SupervisionPlan, list[TradeoffCurve], list[ConfusionMatrix]]:
    """Measure per-stage confusion on the analysis split and pick groupings.

    clustering modes: spectral (confusion-affinity spectral clustering),
    kmeans (k-means over per-class mean stage features), manual
    (contiguous groups with halved class counts, bypassing the selector).
    """
    if clustering not in CLUSTERING_MODES:
        raise ValueError(f"unknown clustering mode {clustering!r}")
    num_classes = net.config.num_classes
    if any(c != num_classes for c in net.config.head_counts):
        raise ValueError("plan derivation needs a fully supervised network")

    present = np.unique(np.asarray(analysis_labels))
    present = present[present != ignore_index]
    missing = sorted(set(range(num_classes)) - set(int(v) for v in present))
    if missing:
        warnings.warn(
            f"analysis split lacks classes {missing}; confusion rows will be empty",
            stacklevel=2,
        )

    confs = stage_confusions(net, analysis_images, analysis_labels, ignore_index)
    intermediate, final_conf = confs[:-1], confs[-1]

    cluster_fns = None
    if clustering == "kmeans":
        cluster_fns = []
        for i in range(len(intermediate)):
            emb = class_feature_embeddings(
                net, analysis_images, analysis_labels, i, ignore_index
            )
            cluster_fns.append(
                lambda k, e=emb: cluster_embeddings(e, k, seed)
            )
    elif clustering == "manual":
        cluster_fns = [
            (lambda k: manual_contiguous_map(num_classes, k))
            for _ in range(len(intermediate))
        ]

    curves = build_stage_curves(
        intermediate, seed, row_normalize=row_normalize, cluster_fns=cluster_fns
    )

    if clustering == "manual":
        plan = manual_plan(num_classes, len(intermediate), gammas)
    else:
        ref = reference_from_confusion(final_conf)
        plan = plan_from_curves(curves, ref, selector, gammas)
    return plan, curves, confs


def two_phase_pipeline(
    images: np.ndarray,
    labels: np.ndarray,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    selector: SelectorConfig | None = None,
    gammas: float | Sequence[float] | None = None,
    clustering: str = "spectral",
    reduced_fraction: float = 0.9,
    phase1_epochs: int | None = None,
    warm_start: bool = False,
    row_normalize: bool = True,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    fuse_plan=None,
) -> TwoPhaseResult:
    """Phase 1 on a reduced split to derive the plan, phase 2 from scratch.

    Phase 1 trains the fully supervised network on ``reduced_fraction``
    of the data and measures per-stage confusion on the held-out
    analysis slice. Phase 2 retrains with the derived plan on all the
    data, re-initialized from the same seed (or from the phase-1 trunk
    when ``warm_start`` is set). Passing ``fuse_plan`` attaches the
    attention-fusion blocks to the phase-2 network first.
    """
    if selector is None:
        selector = SelectorConfig()
    if not 0.0 < reduced_fraction < 1.0:
        raise ValueError("reduced_fraction must lie strictly between 0 and 1")
    images = np.asarray(images)
    labels = np.asarray(labels)
    count = images.shape[0]
    order = stream(cfg.seed, "split").permutation(count)
    n_reduced = int(round(count * reduced_fraction))
    if n_reduced == 0 or n_reduced == count:
        raise ValueError("split leaves an empty side")
    reduced_idx = np.sort(order[:n_reduced])
    analysis_idx = np.sort(order[n_reduced:])

    num_classes = net_cfg.num_classes
    phase1_cfg = cfg if phase1_epochs is None else dataclasses.replace(
        cfg, epochs=phase1_epochs
    )
    ds_plan = identity_plan(
        num_classes, net_cfg.num_intermediate,
        DEFAULT_GAMMA if gammas is None or not isinstance(gammas, (int, float))
        else float(gammas),
    )
    phase1_net, phase1_history = train(
        images[reduced_idx], labels[reduced_idx], ds_plan, net_cfg, phase1_cfg
    )

    plan, curves, confs = derive_plan_from_phase1(
        phase1_net,
        images[analysis_idx],
        labels[analysis_idx],
        selector,
        gammas=gammas,
        clustering=clustering,
        seed=cfg.seed,
        row_normalize=row_normalize,
        ignore_index=cfg.ignore_index,
    )

    phase2_cfg_net = network_config_for_plan(net_cfg, plan)
    phase2_net = SegNet(phase2_cfg_net, cfg.seed)
    if warm_start:
        for i in range(net_cfg.num_stages):
            for suffix in ("w", "b"):
                name = f"stage{i + 1}.conv.{suffix}"
                phase2_net.params[name].data = phase1_net.params[name].data.copy()
    if fuse_plan is not None:
        from .ocrfuse import attach_fuse

        phase2_net = attach_fuse(phase2_net, fuse_plan, cfg.seed)
    phase2_net, phase2_history = train(
        images, labels, plan, phase2_cfg_net, cfg, val=val, net=phase2_net
    )
    return TwoPhaseResult(
        phase2_net, plan, curves, confs, phase1_history, phase2_history
    )
