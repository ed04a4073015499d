"""Context-block and fusion tests: algebraic fixtures plus gradients."""

from __future__ import annotations

import math

import numpy as np
import pytest

from hierseg.autodiff import Tensor, backward, linear_lastdim, reshape
from hierseg.ocrfuse import (
    FusePlan,
    FusedSegNet,
    attach_fuse,
    build_fuse_plan,
    fused_parameter_count,
    ocr_block_forward,
    ocr_param_count,
)
from hierseg.toynet import (
    NetworkConfig,
    SegNet,
    TrainConfig,
    grad_check,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from hierseg.tradeoff import identity_plan


def weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    flat = reshape(t, (1, t.size))
    return reshape(linear_lastdim(flat, Tensor(weights.reshape(-1, 1))), ())


def block_params(rng, in_ch, width):
    return {
        "query_w": Tensor(rng.normal(size=(in_ch, width)) * 0.3),
        "key_w": Tensor(rng.normal(size=(in_ch, width)) * 0.3),
        "value_w": Tensor(rng.normal(size=(in_ch, width)) * 0.3),
        "out_w": Tensor(rng.normal(size=(width, in_ch + width, 1, 1)) * 0.3),
        "out_b": Tensor(np.zeros(width)),
    }


def small_net(num_classes=4, channels=(4, 8), seed=0):
    cfg = NetworkConfig(
        head_counts=(num_classes,) * len(channels),
        stage_channels=channels,
        pool_factors=(2,) * len(channels),
    )
    return SegNet(cfg, seed=seed)


def striped(rng, count, size, k, noise=0.05):
    width = size // k
    labels = np.zeros((count, size, size), dtype=np.int64)
    for x in range(size):
        labels[:, :, x] = min(x // width, k - 1)
    images = np.zeros((count, size, size, 3))
    images[..., 0] = labels / k
    images[..., 1] = 1.0 - labels / k
    images[..., 2] = 0.5
    images += rng.normal(scale=noise, size=images.shape)
    return np.clip(images, 0.0, 1.0), labels


class TestFusePlanArithmetic:
    def test_widths_halve_toward_shallow_stages(self):
        plan = build_fuse_plan(32, 2)
        assert plan.stage_widths == (8, 16)
        assert plan.final_width == 32

    def test_uniform_scale_floors(self):
        plan = build_fuse_plan(32, 2, scale=0.5)
        assert plan.stage_widths == (4, 8)
        assert plan.final_width == 16

    def test_three_stages(self):
        plan = build_fuse_plan(32, 3)
        assert plan.stage_widths == (4, 8, 16)

    def test_widths_never_drop_below_one(self):
        plan = build_fuse_plan(2, 3)
        assert plan.stage_widths == (1, 1, 1)
        plan = build_fuse_plan(3, 2, scale=0.1)
        assert plan.stage_widths == (1, 1) and plan.final_width == 1

    def test_no_intermediate_stages(self):
        plan = build_fuse_plan(32, 0)
        assert plan.stage_widths == ()
        assert plan.final_width == 32

    def test_invalid_arguments_rejected(self):
        with pytest.raises(ValueError):
            build_fuse_plan(0, 2)
        with pytest.raises(ValueError):
            build_fuse_plan(32, -1)
        with pytest.raises(ValueError):
            build_fuse_plan(32, 2, scale=0.0)

    def test_json_round_trip(self):
        plan = build_fuse_plan(32, 2, scale=0.5)
        assert FusePlan.from_json_dict(plan.to_json_dict()) == plan


class TestOcrBlock:
    def test_uniform_logits_pool_the_spatial_mean(self):
        rng = np.random.default_rng(1)
        feats_arr = rng.normal(size=(2, 3, 4, 4))
        logits_arr = np.zeros((2, 2, 4, 4))  # flat -> uniform pooling
        params = block_params(rng, 3, 3)
        params["value_w"] = Tensor(np.eye(3))
        out_w = np.zeros((3, 6, 1, 1))
        out_w[:, 3:, 0, 0] = np.eye(3)  # pass the context straight through
        params["out_w"] = Tensor(out_w)
        out = ocr_block_forward(Tensor(feats_arr), Tensor(logits_arr), **params).data
        mean = feats_arr.reshape(2, 3, 16).mean(axis=2)
        for n in range(2):
            for i in range(4):
                for j in range(4):
                    assert np.allclose(out[n, :, i, j], mean[n], atol=1e-12)

    def test_single_region_broadcasts_its_context(self):
        rng = np.random.default_rng(2)
        feats = Tensor(rng.normal(size=(1, 3, 3, 3)))
        logits = Tensor(rng.normal(size=(1, 1, 3, 3)))
        params = block_params(rng, 3, 2)
        out_w = np.zeros((2, 5, 1, 1))
        out_w[:, 3:, 0, 0] = np.eye(2)
        params["out_w"] = Tensor(out_w)
        out = ocr_block_forward(feats, logits, **params).data
        flat = out.reshape(2, 9)
        assert np.allclose(flat, flat[:, :1], atol=1e-12)

    def test_region_vectors_are_convex_combinations(self):
        rng = np.random.default_rng(3)
        from hierseg.autodiff import batched_matmul, softmax, transpose

        feats_arr = rng.normal(size=(2, 5, 4, 4))
        logits_arr = rng.normal(size=(2, 3, 4, 4))
        weights = softmax(Tensor(logits_arr.reshape(2, 3, 16)), axis=-1)
        assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
        regions = batched_matmul(
            weights, transpose(Tensor(feats_arr.reshape(2, 5, 16)), (0, 2, 1))
        ).data
        lo = feats_arr.reshape(2, 5, 16).min(axis=2)
        hi = feats_arr.reshape(2, 5, 16).max(axis=2)
        for n in range(2):
            for r in range(3):
                assert np.all(regions[n, r] >= lo[n] - 1e-12)
                assert np.all(regions[n, r] <= hi[n] + 1e-12)

    def test_mismatched_logits_rejected(self):
        rng = np.random.default_rng(4)
        params = block_params(rng, 3, 2)
        with pytest.raises(ValueError):
            ocr_block_forward(
                Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))), **params
            )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        feats_arr = rng.normal(size=(1, 3, 3, 3))
        logits_arr = rng.normal(size=(1, 2, 3, 3))
        names = ["query_w", "key_w", "value_w", "out_w", "out_b"]
        base = block_params(rng, 3, 2)
        arrays = [feats_arr, logits_arr] + [base[n].data.copy() for n in names]
        proj = rng.normal(size=2 * 9)

        def build(*leaves):
            feats, logits = leaves[0], leaves[1]
            kw = dict(zip(names, leaves[2:]))
            return weighted_sum(ocr_block_forward(feats, logits, **kw), proj)

        tensors = [Tensor(a.copy()) for a in arrays]
        out = build(*tensors)
        backward(out)
        eps = 1e-6
        for which, arr in enumerate(arrays):
            grad = tensors[which].grad
            assert grad is not None
            picks = rng.choice(arr.size, size=min(20, arr.size), replace=False)
            for c in picks:
                idx = np.unravel_index(int(c), arr.shape)
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[which][idx] += eps
                minus[which][idx] -= eps
                numeric = (
                    float(build(*[Tensor(a) for a in plus]).data)
                    - float(build(*[Tensor(a) for a in minus]).data)
                ) / (2 * eps)
                analytic = float(grad[idx])
                rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                assert rel <= 1e-4


class TestFusedNetwork:
    def test_initial_fused_logits_equal_base_logits(self):
        rng = np.random.default_rng(10)
        net = small_net()
        fused = attach_fuse(net, build_fuse_plan(8, 1), seed=3)
        images = rng.random(size=(2, 8, 8, 3))
        base_logits = net.forward(images).final_logits.data
        fused_logits = fused.forward(images).final_logits.data
        assert np.array_equal(fused_logits, base_logits)

    def test_intermediate_heads_still_emit_logits(self):
        rng = np.random.default_rng(11)
        net = small_net()
        fused = attach_fuse(net, build_fuse_plan(8, 1), seed=3)
        out = fused.forward(rng.random(size=(1, 8, 8, 3)))
        assert [t.shape for t in out.stage_logits] == [(1, 4, 8, 8), (1, 4, 8, 8)]

    def test_zeroing_enhanced_weights_isolates_final_features(self):
        rng = np.random.default_rng(12)
        net = small_net()
        fused = attach_fuse(net, build_fuse_plan(8, 1), seed=3)
        images = rng.random(size=(1, 8, 8, 3))
        before = fused.forward(images).final_logits.data
        # scramble the context parameters; the fuse weights on the
        # enhanced block are zero, so the output must not move
        for name in ("ocr1.query.w", "ocr1.key.w", "ocr1.value.w", "ocr1.out.w"):
            fused.params[name].data = fused.params[name].data + 1.5
        after = fused.forward(images).final_logits.data
        assert np.array_equal(before, after)

    def test_parameter_sharing_with_base(self):
        net = small_net()
        fused = attach_fuse(net, build_fuse_plan(8, 1), seed=3)
        assert fused.params["stage1.conv.w"] is net.params["stage1.conv.w"]
        assert fused.params["head2.w"] is net.params["head2.w"]

    def test_parameter_count_matches_closed_form_at_scale_one(self):
        net = small_net()
        plan = build_fuse_plan(8, 1)
        fused = attach_fuse(net, plan, seed=3)
        want = fused_parameter_count(net.config, plan)
        assert fused.count_parameters() == want
        extra = ocr_param_count(4, 4) + 8 * (4 + 8) + 8
        assert want == net.count_parameters() + extra

    def test_parameter_count_matches_closed_form_at_half_scale(self):
        net = small_net()
        plan = build_fuse_plan(8, 1, scale=0.5)
        fused = attach_fuse(net, plan, seed=3)
        assert fused.count_parameters() == fused_parameter_count(net.config, plan)
        assert "fusehead.w" in fused.params  # narrower head is its own

    def test_three_stage_attach_and_count(self):
        cfg = NetworkConfig(head_counts=(5, 5, 5), stage_channels=(4, 8, 16),
                            pool_factors=(2, 2, 2))
        net = SegNet(cfg, seed=1)
        plan = build_fuse_plan(16, 2)
        fused = attach_fuse(net, plan, seed=1)
        assert fused.count_parameters() == fused_parameter_count(cfg, plan)
        out = fused.forward(np.zeros((1, 8, 8, 3)))
        assert out.final_logits.shape == (1, 5, 8, 8)

    def test_stage_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attach_fuse(small_net(), build_fuse_plan(8, 2), seed=0)

    def test_base_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attach_fuse(small_net(), build_fuse_plan(16, 1), seed=0)

    def test_gradient_check_on_fused_network(self):
        rng = np.random.default_rng(13)
        images, labels = striped(rng, 2, 8, 4, noise=0.1)
        fused = attach_fuse(small_net(seed=2), build_fuse_plan(8, 1), seed=5)
        err = grad_check(fused, images, labels, plan=identity_plan(4, 1),
                         coords_per_layer=25, seed=0)
        assert err <= 1e-4

    def test_fused_training_runs_and_stays_finite(self):
        rng = np.random.default_rng(14)
        images, labels = striped(rng, 12, 8, 4)
        net = small_net(seed=6)
        fused = attach_fuse(net, build_fuse_plan(8, 1), seed=6)
        cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=0.1, seed=6)
        fused, history = train(
            images, labels, identity_plan(4, 1), net.config, cfg, net=fused
        )
        assert all(math.isfinite(h.total_loss) for h in history)
        assert history[-1].total_loss < history[0].total_loss

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        fused = attach_fuse(small_net(seed=7), build_fuse_plan(8, 1), seed=7)
        path = tmp_path / "fused.ckpt"
        save_checkpoint(path, fused, meta={"variant": "hs3fuse"})
        loaded, meta = load_checkpoint(path)
        assert isinstance(loaded, FusedSegNet)
        assert meta == {"variant": "hs3fuse"}
        assert loaded.plan == fused.plan
        images = rng.random(size=(2, 8, 8, 3))
        assert np.array_equal(predict(loaded, images), predict(fused, images))
        for name in fused.params:
            assert np.array_equal(loaded.params[name].data, fused.params[name].data)
