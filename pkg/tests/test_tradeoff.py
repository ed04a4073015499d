"""Tests for trade-off curves, the ratio and angle selectors, and plans."""

from __future__ import annotations

import math

import numpy as np
import pytest

from hierseg.segmetrics import ClusterMap, ConfusionMatrix, merge_confusion, metrics_from_confusion
from hierseg.speclust import manual_contiguous_map
from hierseg.tradeoff import (
    ReferencePoint,
    SelectorConfig,
    SupervisionPlan,
    TradeoffCurve,
    build_stage_curves,
    build_tradeoff_curve,
    derive_supervision_plan,
    identity_plan,
    load_plan,
    plan_from_curves,
    read_curves_csv,
    reference_from_confusion,
    save_plan,
    select_by_ratio,
    select_by_theta,
    write_curves_csv,
)


def synth_curve(mious, stage_id=1) -> TradeoffCurve:
    """Curve over k = 2..K with contiguous-halving maps standing in."""
    k_full = len(mious) + 1
    points = [(k, float(m)) for k, m in zip(range(2, k_full + 1), mious)]
    maps = [manual_contiguous_map(k_full, k) for k in range(2, k_full + 1)]
    return TradeoffCurve(stage_id, points, maps)


def linear_curve(k_full, intercept, slope_per_k) -> TradeoffCurve:
    return synth_curve([intercept - slope_per_k * k for k in range(2, k_full + 1)])


class TestBuildCurve:
    def test_perfect_predictions_flat_at_one(self):
        conf = ConfusionMatrix(5, np.diag([9, 4, 6, 3, 8]))
        curve = build_tradeoff_curve(conf, seed=0)
        assert [k for k, _ in curve.points] == [2, 3, 4, 5]
        assert all(m == 1.0 for _, m in curve.points)

    def test_merging_confused_pair_raises_miou(self):
        conf = ConfusionMatrix(3, [[50, 40, 0], [40, 50, 0], [0, 0, 90]])
        curve = build_tradeoff_curve(conf, seed=0)
        by_k = dict(curve.points)
        # Hand merge of {0,1}: [[180, 0], [0, 90]] is perfect.
        assert by_k[2] == 1.0
        assert by_k[3] == metrics_from_confusion(conf).miou
        assert by_k[2] > by_k[3]
        pair_map = curve.maps[0]
        assert pair_map.assignment[0] == pair_map.assignment[1]
        assert pair_map.assignment[2] != pair_map.assignment[0]

    def test_every_point_matches_merge_oracle(self):
        rng = np.random.default_rng(40)
        for _ in range(10):
            k_full = int(rng.integers(3, 8))
            counts = rng.integers(0, 30, size=(k_full, k_full)) + np.diag(
                rng.integers(20, 60, size=k_full)
            )
            conf = ConfusionMatrix(k_full, counts)
            curve = build_tradeoff_curve(conf, seed=1)
            for (k, miou), cmap in zip(curve.points, curve.maps):
                assert cmap.num_clusters == k
                expected = metrics_from_confusion(merge_confusion(conf, cmap)).miou
                assert miou == expected

    def test_identity_point_last(self):
        conf = ConfusionMatrix(4, np.diag([5, 5, 5, 5]) + 1)
        curve = build_tradeoff_curve(conf, seed=0)
        assert curve.maps[-1].is_identity()
        assert curve.points[-1] == (4, metrics_from_confusion(conf).miou)

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(41)
        counts = rng.integers(0, 40, size=(6, 6))
        conf = ConfusionMatrix(6, counts + np.diag([50] * 6))
        a = build_tradeoff_curve(conf, seed=9)
        b = build_tradeoff_curve(conf, seed=9)
        assert a.points == b.points
        for ma, mb in zip(a.maps, b.maps):
            assert np.array_equal(ma.assignment, mb.assignment)

    def test_too_few_classes_rejected(self):
        with pytest.raises(ValueError, match="at least 3"):
            build_tradeoff_curve(ConfusionMatrix(2, [[1, 0], [0, 1]]), seed=0)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="all zero"):
            build_tradeoff_curve(ConfusionMatrix.empty(4), seed=0)


class TestSelectByRatio:
    def test_reference_fixture_selects_eight(self):
        # Curve miou(k) = 1 - 0.05k for k=2..10 against ratio 0.8/10.
        curve = linear_curve(10, 1.0, 0.05)
        k, cmap = select_by_ratio(curve, ReferencePoint(10, 0.8))
        assert k == 8
        assert cmap.num_clusters == 8
        # Exhaustive check of the argmin the rule is defined by.
        dists = {kk: abs(m / kk - 0.08) for kk, m in curve.points}
        assert min(dists, key=lambda kk: (dists[kk], -kk)) == 8

    def test_exact_match_only_at_full_count(self):
        curve = synth_curve([0.9, 0.9, 0.9, 0.5])  # K=5, ratio hits 0.5/5 at k=5
        k, _ = select_by_ratio(curve, ReferencePoint(5, 0.5))
        assert k == 5

    def test_tie_goes_to_larger_k(self):
        # target 0.25: k=2 at miou .75 and k=3 at miou .375 are both 0.125 away.
        curve = synth_curve([0.75, 0.375])
        k, _ = select_by_ratio(curve, ReferencePoint(3, 0.75))
        assert abs(0.75 / 2 - 0.25) == abs(0.375 / 3 - 0.25)
        assert k == 3

    def test_invariant_under_uniform_miou_rescaling(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            k_full = int(rng.integers(3, 12))
            mious = rng.uniform(0.2, 1.0, size=k_full - 1)
            ref_miou = float(rng.uniform(0.2, 1.0))
            scale = float(rng.uniform(0.1, 1.0))
            k_base, _ = select_by_ratio(synth_curve(mious), ReferencePoint(k_full, ref_miou))
            k_scaled, _ = select_by_ratio(
                synth_curve(mious * scale), ReferencePoint(k_full, ref_miou * scale)
            )
            assert k_base == k_scaled

    def test_within_one_step_of_continuous_crossing(self):
        rng = np.random.default_rng(43)
        for _ in range(25):
            k_full = int(rng.integers(4, 12))
            ks = np.arange(2, k_full + 1, dtype=np.float64)
            # Strictly decreasing miou/k with miou in (0, 1].
            ratios = np.sort(rng.uniform(0.02, 1.0 / k_full, size=k_full - 1))[::-1]
            mious = ratios * ks
            target = float(rng.uniform(ratios[-1], ratios[0]))
            ref = ReferencePoint(k_full, target * k_full)
            k_sel, _ = select_by_ratio(synth_curve(mious), ref)

            crossing = None
            for j in range(len(ks) - 1):
                lo, hi = mious[j] / ks[j] - target, mious[j + 1] / ks[j + 1] - target
                if lo == 0.0:
                    crossing = ks[j]
                    break
                if lo * hi < 0:
                    slope = (mious[j + 1] - mious[j]) / (ks[j + 1] - ks[j])
                    crossing = (mious[j] - slope * ks[j]) / (target - slope)
                    break
            if crossing is None:
                crossing = ks[-1]
            assert abs(k_sel - crossing) <= 1.0 + 1e-9


class TestSelectByTheta:
    def test_zero_degrees_returns_full_count(self):
        rng = np.random.default_rng(44)
        for _ in range(10):
            k_full = int(rng.integers(3, 10))
            curve = synth_curve(rng.uniform(0.1, 1.0, size=k_full - 1))
            cfg = SelectorConfig(mode="theta", theta_degrees=0.0)
            k, cmap = select_by_theta(curve, ReferencePoint(k_full, 0.5), cfg)
            assert k == k_full
            assert cmap.is_identity()

    def test_ninety_degrees_horizontal_crossing(self):
        curve = linear_curve(10, 1.0, 0.05)
        cfg = SelectorConfig(mode="theta", theta_degrees=90.0)
        k, _ = select_by_theta(curve, ReferencePoint(10, 0.7), cfg)
        assert k == 6  # solve 1 - 0.05k = 0.7

    def test_ninety_degrees_matches_crossing_on_random_decreasing_curves(self):
        rng = np.random.default_rng(45)
        for _ in range(25):
            k_full = int(rng.integers(4, 12))
            mious = np.sort(rng.uniform(0.05, 0.95, size=k_full - 1))[::-1]
            ref_miou = float(rng.uniform(mious.min(), mious.max()))
            cfg = SelectorConfig(mode="theta", theta_degrees=90.0)
            k_sel, _ = select_by_theta(synth_curve(mious), ReferencePoint(k_full, ref_miou), cfg)

            ks = np.arange(2, k_full + 1, dtype=np.float64)
            j = int(np.searchsorted(-mious, -ref_miou, side="right")) - 1
            j = min(max(j, 0), k_full - 3)
            t = (mious[j] - ref_miou) / (mious[j] - mious[j + 1])
            crossing = ks[j] + t
            assert abs(k_sel - crossing) <= 0.5 + 1e-9

    def test_origin_line_matches_ratio_rule_on_fixture(self):
        curve = linear_curve(10, 1.0, 0.05)
        ref = ReferencePoint(10, 0.8)
        # Default scaling puts the reference at (1, 0.8); the line through
        # the origin and the reference leaves the vertical by atan(1/0.8).
        theta = math.degrees(math.atan2(1.0, 0.8))
        cfg = SelectorConfig(mode="theta", theta_degrees=theta)
        k_theta, _ = select_by_theta(curve, ref, cfg)
        k_ratio, _ = select_by_ratio(curve, ref)
        assert k_theta == k_ratio == 8

    def test_midpoint_tie_snaps_to_larger_k(self):
        # Dyadic mious make the crossing land exactly on k = 6.5.
        mious = [1.0 - k / 16.0 for k in range(2, 15)]
        curve = synth_curve(mious)
        cfg = SelectorConfig(mode="theta", theta_degrees=90.0)
        k, _ = select_by_theta(curve, ReferencePoint(14, 1.0 - 6.5 / 16.0), cfg)
        assert k == 7

    def test_miss_clamps_to_nearest_endpoint_and_warns(self):
        curve = linear_curve(10, 1.0, 0.05)  # mious 0.9 down to 0.5
        cfg = SelectorConfig(mode="theta", theta_degrees=90.0)
        with pytest.warns(UserWarning, match="clamped to k=2"):
            k, _ = select_by_theta(curve, ReferencePoint(10, 0.99), cfg)
        assert k == 2
        with pytest.warns(UserWarning, match="clamped to k=10"):
            k, _ = select_by_theta(curve, ReferencePoint(10, 0.01), cfg)
        assert k == 10

    def test_explicit_axis_scale_changes_geometry(self):
        curve = linear_curve(10, 1.0, 0.05)
        ref = ReferencePoint(10, 0.8)
        base = SelectorConfig(mode="theta", theta_degrees=45.0)
        stretched = SelectorConfig(mode="theta", theta_degrees=45.0, axis_scale=(1.0, 1.0))
        k_base, _ = select_by_theta(curve, ref, base)
        k_stretched, _ = select_by_theta(curve, ref, stretched)
        # With x in raw class-count units the 45-degree line is far
        # shallower relative to the curve, so the pick moves.
        assert k_base != k_stretched

    def test_config_validation(self):
        with pytest.raises(ValueError, match="mode"):
            SelectorConfig(mode="slope")
        with pytest.raises(ValueError, match="theta"):
            SelectorConfig(mode="theta", theta_degrees=91.0)
        with pytest.raises(ValueError, match="positive"):
            SelectorConfig(mode="theta", theta_degrees=10.0, axis_scale=(0.0, 1.0))


def heavy_confusion(num_classes, pairs, off=40, diag=50, rest=2):
    counts = np.full((num_classes, num_classes), rest, dtype=np.int64)
    np.fill_diagonal(counts, diag)
    for a, b in pairs:
        counts[a, b] = counts[b, a] = off
    return ConfusionMatrix(num_classes, counts)


class TestDeriveSupervisionPlan:
    def test_identical_confusions_give_identical_stages(self):
        conf = heavy_confusion(6, [(0, 1), (2, 3)])
        plan = derive_supervision_plan([conf, conf.copy()], conf, SelectorConfig())
        a, b = plan.stages
        assert a.class_set.num_clusters == b.class_set.num_clusters
        assert np.array_equal(a.class_set.assignment, b.class_set.assignment)

    def test_more_confused_stage_gets_no_more_classes(self):
        # Stage 1 confuses three pairs, stage 2 only one; the final output
        # is nearly clean. Stage 1's curve then sits below stage 2's.
        stage1 = heavy_confusion(6, [(0, 1), (2, 3), (4, 5)], off=45)
        stage2 = heavy_confusion(6, [(0, 1)], off=20, rest=1)
        final = heavy_confusion(6, [], off=0, rest=1)
        c1, c2 = build_stage_curves([stage1, stage2], seed=0)
        assert all(m1 <= m2 for (_, m1), (_, m2) in zip(c1.points, c2.points))
        plan = derive_supervision_plan([stage1, stage2], final, SelectorConfig())
        k1, k2 = plan.stage_class_counts
        assert k1 <= k2

    def test_theta_zero_plan_is_plain_deep_supervision(self):
        conf = heavy_confusion(5, [(0, 1)])
        cfg = SelectorConfig(mode="theta", theta_degrees=0.0)
        plan = derive_supervision_plan([conf, conf.copy()], conf, cfg)
        assert all(s.class_set.is_identity() for s in plan.stages)
        ds = identity_plan(5, 2)
        assert plan.stage_class_counts == ds.stage_class_counts

    def test_default_and_custom_gammas(self):
        conf = heavy_confusion(5, [(0, 1)])
        plan = derive_supervision_plan([conf, conf.copy()], conf, SelectorConfig())
        assert [s.weight for s in plan.stages] == [0.4, 0.4]
        assert plan.final.weight == 1.0
        custom = derive_supervision_plan(
            [conf, conf.copy()], conf, SelectorConfig(), gammas=[0.1, 0.7]
        )
        assert [s.weight for s in custom.stages] == [0.1, 0.7]
        scalar = derive_supervision_plan([conf, conf.copy()], conf, SelectorConfig(), gammas=0.25)
        assert [s.weight for s in scalar.stages] == [0.25, 0.25]

    def test_gamma_count_mismatch_rejected(self):
        conf = heavy_confusion(5, [(0, 1)])
        with pytest.raises(ValueError, match="gammas"):
            derive_supervision_plan([conf], conf, SelectorConfig(), gammas=[0.4, 0.4])

    def test_final_entry_identity(self):
        conf = heavy_confusion(5, [(0, 1)])
        plan = derive_supervision_plan([conf], conf, SelectorConfig())
        assert plan.final.class_set.is_identity()
        assert plan.final.stage_id == 2
        assert plan.num_classes == 5

    def test_stage_errors_carry_stage_id(self):
        good = heavy_confusion(5, [(0, 1)])
        with pytest.raises(ValueError, match="stage 2: confusion matrix is all zero"):
            derive_supervision_plan([good, ConfusionMatrix.empty(5)], good, SelectorConfig())

    def test_negative_gamma_rejected(self):
        conf = heavy_confusion(5, [(0, 1)])
        with pytest.raises(ValueError, match="non-negative"):
            derive_supervision_plan([conf], conf, SelectorConfig(), gammas=-0.1)

    def test_reference_from_confusion_rejects_empty(self):
        with pytest.raises(ValueError, match="no defined classes"):
            reference_from_confusion(ConfusionMatrix.empty(4))


class TestPlanSerialization:
    def test_round_trip_and_determinism(self, tmp_path):
        conf = heavy_confusion(6, [(0, 1), (2, 3)])
        plan = derive_supervision_plan([conf, conf.copy()], conf, SelectorConfig())
        first = tmp_path / "plan.json"
        save_plan(first, plan)
        back = load_plan(first)
        assert back.stage_class_counts == plan.stage_class_counts
        assert [s.weight for s in back.stages] == [s.weight for s in plan.stages]
        for a, b in zip(back.stages, plan.stages):
            assert np.array_equal(a.class_set.assignment, b.class_set.assignment)
        second = tmp_path / "plan2.json"
        save_plan(second, back)
        assert second.read_bytes() == first.read_bytes()

    def test_plan_validation(self):
        with pytest.raises(ValueError, match="intermediate"):
            SupervisionPlan.from_json_dict({"stages": [
                {"stage_id": 1, "k": 3, "gamma": 1.0, "assignment": [0, 1, 2]}
            ]})

    def test_identity_plan_shape(self):
        plan = identity_plan(8, 2)
        assert plan.stage_class_counts == [8, 8]
        assert [s.weight for s in plan.stages] == [0.4, 0.4]


class TestCurvesCsv:
    def test_round_trip(self, tmp_path):
        conf = heavy_confusion(5, [(0, 1)])
        curves = build_stage_curves([conf, conf.copy()], seed=0)
        path = tmp_path / "curves.csv"
        write_curves_csv(path, curves)
        rows = read_curves_csv(path)
        assert [r for r in rows if r[0] == 1] == [
            (1, k, m) for k, m in curves[0].points
        ]
        again = tmp_path / "curves2.csv"
        write_curves_csv(again, curves)
        assert again.read_bytes() == path.read_bytes()

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("a,b,c\n1,2,0.5\n")
        with pytest.raises(ValueError, match="header"):
            read_curves_csv(path)
