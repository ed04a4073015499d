"""Attention-based context blocks and multi-stage feature fusion.

Each intermediate stage gets a context block: its head logits are
softmaxed over space to pool features into one representative vector
per class, then every pixel attends over those class regions
(scaled dot-product) and the attended context is concatenated back and
projected. The enhanced stage maps are resized to the final stage's
resolution, concatenated with the final features, and projected once
more before the final head.

The fuse projection starts as an exact pass-through of the final
features (enhanced-map weights at zero), so an attached network begins
with bit-identical final logits and learns to use the context terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    batched_matmul,
    concat_channels,
    conv2d,
    linear_lastdim,
    mul_scalar,
    reshape,
    resize_nearest,
    softmax,
    transpose,
)
from .seeding import stream
from .toynet import NetworkConfig, SegNet, StageOutputs


@dataclass(frozen=True)
class FusePlan:
    """Channel widths for the context blocks and the fused projection.

    ``stage_widths`` runs shallow to deep over the intermediate stages;
    widths halve toward shallower stages from the final stage's channel
    count, then everything is scaled by ``scale`` (floored, min 1).
    """

    base_channels: int
    stage_widths: tuple[int, ...]
    final_width: int
    scale: float

    def __post_init__(self) -> None:
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.final_width < 1 or any(w < 1 for w in self.stage_widths):
            raise ValueError("all widths must be positive")
        if any(a > b for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError("stage widths must be non-decreasing toward the deep end")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def to_json_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "stage_widths": list(self.stage_widths),
            "final_width": self.final_width,
            "scale": self.scale,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FusePlan":
        return cls(
            int(obj["base_channels"]),
            tuple(int(v) for v in obj["stage_widths"]),
            int(obj["final_width"]),
            float(obj["scale"]),
        )


def build_fuse_plan(base_channels: int, num_stages: int, scale: float = 1.0) -> FusePlan:
    """Halve widths toward shallow stages, then apply the uniform scale."""
    if base_channels < 1:
        raise ValueError("base_channels must be positive")
    if num_stages < 0:
        raise ValueError("num_stages must be non-negative")
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError("scale must be positive")
    unscaled = []
    width = base_channels
    for _ in range(num_stages):
        width = max(1, width // 2)
        unscaled.append(width)
    unscaled.reverse()
    stage_widths = tuple(max(1, int(math.floor(w * scale))) for w in unscaled)
    final_width = max(1, int(math.floor(base_channels * scale)))
    return FusePlan(base_channels, stage_widths, final_width, scale)


def ocr_param_count(in_channels: int, width: int) -> int:
    """Query, key, value projections plus the output projection and bias."""
    return 3 * in_channels * width + (in_channels + width) * width + width


def ocr_block_forward(
    features: Tensor,
    logits: Tensor,
    query_w: Tensor,
    key_w: Tensor,
    value_w: Tensor,
    out_w: Tensor,
    out_b: Tensor,
) -> Tensor:
    """Soft class-region pooling followed by pixel-region attention.

    features: (B, C, h, w); logits: (B, k, h, w) from the stage head at
    the same resolution. Per class, logits are softmaxed over space and
    used as pooling weights (each region vector is a convex combination
    of pixel features). Pixels attend over regions with scaled
    dot-product attention; the attended context is concatenated to the
    pixel features and projected to the block width by a 1x1 conv.
    """
    b, c, h, w = features.shape
    if logits.shape[0] != b or logits.shape[2:] != (h, w):
        raise ValueError(
            f"logits shape {logits.shape} does not match features {features.shape}"
        )
    width = query_w.shape[1]
    pixels = h * w

    weights = softmax(reshape(logits, (b, logits.shape[1], pixels)), axis=-1)
    feats_flat = transpose(reshape(features, (b, c, pixels)), (0, 2, 1))
    regions = batched_matmul(weights, feats_flat)

    queries = linear_lastdim(feats_flat, query_w)
    keys = linear_lastdim(regions, key_w)
    values = linear_lastdim(regions, value_w)
    attn_logits = mul_scalar(
        batched_matmul(queries, transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(width)
    )
    attn = softmax(attn_logits, axis=-1)
    context = batched_matmul(attn, values)
    context_map = reshape(transpose(context, (0, 2, 1)), (b, width, h, w))

    combined = concat_channels([features, context_map])
    return conv2d(combined, out_w, out_b)


class FusedSegNet:
    """A staged network with context blocks fused into its final head.

    Base parameters are shared by reference. When the fused width equals
    the base final width the original final head is reused on the fused
    features; otherwise a replacement head of the right width is added.
    """

    def __init__(self, base: SegNet, plan: FusePlan, seed: int):
        cfg = base.config
        if plan.num_stages != cfg.num_intermediate:
            raise ValueError(
                f"fuse plan covers {plan.num_stages} stages, "
                f"network has {cfg.num_intermediate} intermediate stages"
            )
        if plan.base_channels != cfg.stage_channels[-1]:
            raise ValueError(
                f"fuse plan base {plan.base_channels} != final stage "
                f"channels {cfg.stage_channels[-1]}"
            )
        self.base = base
        self.plan = plan
        self.params: dict[str, Tensor] = dict(base.params)

        counter = 0
        for i, width in enumerate(plan.stage_widths):
            in_ch = cfg.stage_channels[i]
            for role in ("query", "key", "value"):
                bound = 1.0 / math.sqrt(in_ch)
                rng = stream(seed, "ocr_init", counter)
                counter += 1
                self.params[f"ocr{i + 1}.{role}.w"] = Tensor(
                    rng.uniform(-bound, bound, size=(in_ch, width)),
                    name=f"ocr{i + 1}.{role}.w",
                )
            bound = 1.0 / math.sqrt(in_ch + width)
            rng = stream(seed, "ocr_init", counter)
            counter += 1
            self.params[f"ocr{i + 1}.out.w"] = Tensor(
                rng.uniform(-bound, bound, size=(width, in_ch + width, 1, 1)),
                name=f"ocr{i + 1}.out.w",
            )
            self.params[f"ocr{i + 1}.out.b"] = Tensor(
                np.zeros(width), name=f"ocr{i + 1}.out.b"
            )

        total_in = sum(plan.stage_widths) + cfg.stage_channels[-1]
        fuse_w = np.zeros((plan.final_width, total_in, 1, 1))
        offset = sum(plan.stage_widths)
        if plan.final_width == cfg.stage_channels[-1]:
            fuse_w[:, offset:, 0, 0] = np.eye(plan.final_width)
            self._own_head = False
        else:
            bound = 1.0 / math.sqrt(cfg.stage_channels[-1])
            rng = stream(seed, "ocr_init", counter)
            counter += 1
            fuse_w[:, offset:, 0, 0] = rng.uniform(
                -bound, bound, size=(plan.final_width, cfg.stage_channels[-1])
            )
            self._own_head = True
        self.params["fuse.w"] = Tensor(fuse_w, name="fuse.w")
        self.params["fuse.b"] = Tensor(np.zeros(plan.final_width), name="fuse.b")
        if self._own_head:
            bound = 1.0 / math.sqrt(plan.final_width)
            rng = stream(seed, "ocr_init", counter)
            self.params["fusehead.w"] = Tensor(
                rng.uniform(
                    -bound, bound, size=(cfg.num_classes, plan.final_width, 1, 1)
                ),
                name="fusehead.w",
            )
            self.params["fusehead.b"] = Tensor(
                np.zeros(cfg.num_classes), name="fusehead.b"
            )

    @property
    def config(self) -> NetworkConfig:
        return self.base.config

    def forward(self, images: np.ndarray) -> StageOutputs:
        cfg = self.base.config
        outputs = self.base.forward(images)
        cumulative = np.cumprod(cfg.pool_factors)
        final_cum = int(cumulative[-1])

        fused_inputs: list[Tensor] = []
        for i in range(cfg.num_intermediate):
            enhanced = ocr_block_forward(
                outputs.features[i],
                outputs.coarse_logits[i],
                self.params[f"ocr{i + 1}.query.w"],
                self.params[f"ocr{i + 1}.key.w"],
                self.params[f"ocr{i + 1}.value.w"],
                self.params[f"ocr{i + 1}.out.w"],
                self.params[f"ocr{i + 1}.out.b"],
            )
            ratio = final_cum // int(cumulative[i])
            if ratio > 1:
                enhanced = resize_nearest(enhanced, -ratio)
            fused_inputs.append(enhanced)
        fused_inputs.append(outputs.features[-1])

        fused = conv2d(
            concat_channels(fused_inputs), self.params["fuse.w"], self.params["fuse.b"]
        )
        if self._own_head:
            head_w, head_b = self.params["fusehead.w"], self.params["fusehead.b"]
        else:
            n = cfg.num_stages
            head_w, head_b = self.params[f"head{n}.w"], self.params[f"head{n}.b"]
        coarse = conv2d(fused, head_w, head_b)
        final_logits = resize_nearest(coarse, final_cum)

        return StageOutputs(
            [*outputs.stage_logits[:-1], final_logits],
            [*outputs.coarse_logits[:-1], coarse],
            [*outputs.features[:-1], fused],
            outputs.preacts,
        )

    def count_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def attach_fuse(net: SegNet, plan: FusePlan, seed: int) -> FusedSegNet:
    """Wrap a staged network with context blocks and the fused final head."""
    return FusedSegNet(net, plan, seed)


def fused_parameter_count(config: NetworkConfig, plan: FusePlan) -> int:
    """Closed-form size of an attached network's parameter dictionary.

    Base network plus one context block per intermediate stage, the fuse
    projection, and (only when the fused width differs from the final
    stage width) a replacement final head.
    """
    k = config.kernel_size
    total = 0
    in_ch = config.in_channels
    for ch, heads in zip(config.stage_channels, config.head_counts):
        total += ch * in_ch * k * k + ch
        total += heads * ch + heads
        in_ch = ch
    for i, width in enumerate(plan.stage_widths):
        total += ocr_param_count(config.stage_channels[i], width)
    fuse_in = sum(plan.stage_widths) + config.stage_channels[-1]
    total += plan.final_width * fuse_in + plan.final_width
    if plan.final_width != config.stage_channels[-1]:
        total += config.num_classes * plan.final_width + config.num_classes
    return total
