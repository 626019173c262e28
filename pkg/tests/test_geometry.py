import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pillartrack.geometry import (
    Box3D,
    bev_corners,
    center_distance,
    clip_polygon,
    contains_points,
    iou3d,
    normalize_angle,
    polygon_area,
    precision_auc,
    success_auc,
    world_to_box_frame,
)


def random_box(rng, center_scale=1.5, size_lo=0.5, size_hi=2.5):
    cx, cy, cz = rng.uniform(-center_scale, center_scale, 3)
    w, l, h = rng.uniform(size_lo, size_hi, 3)
    yaw = rng.uniform(-math.pi, math.pi)
    return Box3D(cx, cy, cz, w, l, h, yaw)


def mc_iou3d(a, b, n_samples, rng):
    """Monte-Carlo IoU oracle: uniform samples in the joint bounding box."""
    corners = np.vstack([bev_corners(a), bev_corners(b)])
    lo = np.array([corners[:, 0].min(), corners[:, 1].min(),
                   min(a.z - a.h / 2, b.z - b.h / 2)])
    hi = np.array([corners[:, 0].max(), corners[:, 1].max(),
                   max(a.z + a.h / 2, b.z + b.h / 2)])
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = contains_points(a, pts)
    in_b = contains_points(b, pts)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


class TestBox3D:
    def test_yaw_normalized(self):
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)
        assert Box3D(0, 0, 0, 1, 1, 1, math.pi).yaw == pytest.approx(-math.pi)
        assert normalize_angle(-math.pi) == pytest.approx(-math.pi)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0.0, 1, 1, 0)
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, -2, 1, 0)

    def test_roundtrip_array(self):
        box = Box3D(1, 2, 3, 4, 5, 6, 0.5)
        again = Box3D.from_array(box.to_array())
        assert box == again


class TestBevCorners:
    def test_unit_box_axis_aligned(self):
        corners = bev_corners(Box3D(0, 0, 0, 1, 1, 1, 0))
        expected = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
        np.testing.assert_allclose(corners, expected, atol=1e-15)

    def test_quarter_turn_rotates_order(self):
        base = bev_corners(Box3D(0, 0, 0, 1, 1, 1, 0))
        turned = bev_corners(Box3D(0, 0, 0, 1, 1, 1, math.pi / 2))
        np.testing.assert_allclose(turned, np.roll(base, -1, axis=0), atol=1e-12)

    def test_matches_rotation_oracle(self):
        w, l, yaw = 2.0, 1.0, math.pi / 6
        corners = bev_corners(Box3D(0.3, -0.7, 0, w, l, 1, yaw))
        local = np.array([[w / 2, l / 2], [-w / 2, l / 2],
                          [-w / 2, -l / 2], [w / 2, -l / 2]])
        rot = np.array([[math.cos(yaw), -math.sin(yaw)],
                        [math.sin(yaw), math.cos(yaw)]])
        oracle = (rot @ local.T).T + [0.3, -0.7]
        np.testing.assert_allclose(corners, oracle, atol=1e-12)

    @given(w=st.floats(0.1, 10), l=st.floats(0.1, 10),
           yaw=st.floats(-math.pi, math.pi - 1e-9),
           cx=st.floats(-50, 50), cy=st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_shoelace_area_equals_wl(self, w, l, yaw, cx, cy):
        area = polygon_area(bev_corners(Box3D(cx, cy, 0, w, l, 1, yaw)))
        assert area == pytest.approx(w * l, rel=1e-9)


class TestClipPolygon:
    def test_self_clip_is_identity(self):
        poly = bev_corners(Box3D(1, 2, 0, 3, 2, 1, 0.3))
        clipped = clip_polygon(poly, poly)
        np.testing.assert_array_equal(clipped, poly)

    def test_disjoint_is_empty(self):
        a = bev_corners(Box3D(0, 0, 0, 1, 1, 1, 0))
        b = bev_corners(Box3D(10, 0, 0, 1, 1, 1, 0))
        assert clip_polygon(a, b).size == 0

    def test_half_overlap(self):
        a = bev_corners(Box3D(0, 0, 0, 1, 1, 1, 0))
        b = bev_corners(Box3D(0.5, 0, 0, 1, 1, 1, 0))
        assert polygon_area(clip_polygon(a, b)) == pytest.approx(0.5, abs=1e-12)


class TestIoU3D:
    def test_identical_is_exactly_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            box = random_box(rng)
            assert iou3d(box, box) == 1.0

    def test_disjoint_is_exactly_zero(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0.2)
        b = Box3D(100, 0, 0, 1, 1, 1, 0.9)
        assert iou3d(a, b) == 0.0
        # vertically disjoint as well
        c = Box3D(0, 0, 10, 1, 1, 1, 0.2)
        assert iou3d(a, c) == 0.0

    def test_axis_aligned_offset_cubes(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0.5, 0, 0, 1, 1, 1, 0)
        assert iou3d(a, b) == pytest.approx(0.5 / 1.5, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            assert iou3d(a, b) == pytest.approx(iou3d(b, a), abs=1e-12)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_box(rng), random_box(rng)
            approx = mc_iou3d(a, b, 200_000, rng)
            assert abs(iou3d(a, b) - approx) <= 0.02


class TestCenterDistance:
    def test_identical_centers(self):
        a = Box3D(1, 2, 3, 1, 1, 1, 0)
        b = Box3D(1, 2, 3, 2, 2, 2, 0.5)
        assert center_distance(a, b) == 0.0

    def test_pythagorean(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(3, 4, 0, 1, 1, 1, 0)
        assert center_distance(a, b) == pytest.approx(5.0)

    def test_matches_componentwise_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = random_box(rng, center_scale=10), random_box(rng, center_scale=10)
            oracle = math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)
            assert center_distance(a, b) == pytest.approx(oracle, rel=1e-12)


def brute_force_success(ious):
    thresholds = [i / 20 for i in range(21)]
    total = 0.0
    for t in thresholds:
        total += sum(1 for v in ious if v > t) / len(ious)
    return 100.0 * total / len(thresholds)


def brute_force_precision(distances):
    thresholds = [2.0 * i / 20 for i in range(21)]
    total = 0.0
    for t in thresholds:
        total += sum(1 for v in distances if v < t) / len(distances)
    return 100.0 * total / len(thresholds)


class TestAucMetrics:
    def test_all_perfect_iou(self):
        # 1.0 beats 20 of the 21 thresholds (t=1.0 fails under strict >)
        assert success_auc([1.0, 1.0, 1.0]) == pytest.approx(100.0 * 20 / 21)

    def test_all_zero_iou(self):
        assert success_auc([0.0, 0.0]) == 0.0

    def test_success_matches_double_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            vals = rng.uniform(0, 1, size=rng.integers(1, 40))
            assert success_auc(vals) == pytest.approx(brute_force_success(list(vals)), abs=1e-12)

    def test_all_zero_distance(self):
        assert precision_auc([0.0, 0.0]) == pytest.approx(100.0 * 20 / 21)

    def test_far_distances(self):
        assert precision_auc([10.0, 5.0]) == 0.0

    def test_precision_matches_double_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            vals = rng.uniform(0, 3, size=rng.integers(1, 40))
            assert precision_auc(vals) == pytest.approx(brute_force_precision(list(vals)), abs=1e-12)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            success_auc([])
        with pytest.raises(ValueError):
            precision_auc([])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            success_auc([1.5])
        with pytest.raises(ValueError):
            precision_auc([-0.1])


class TestPointHelpers:
    def test_contains_points_rotated(self):
        box = Box3D(0, 0, 0, 2, 1, 1, math.pi / 2)
        # after a quarter turn the long side (w=2) lies along y
        assert contains_points(box, np.array([[0.0, 0.9, 0.0]]))[0]
        assert not contains_points(box, np.array([[0.9, 0.0, 0.0]]))[0]

    def test_world_to_box_frame_recenters(self):
        box = Box3D(1, 2, 0.5, 2, 1, 1, 0.7)
        pts = np.array([[1, 2, 0.5, 9.0]])
        local = world_to_box_frame(box, pts)
        np.testing.assert_allclose(local[0, :3], 0, atol=1e-12)
        assert local[0, 3] == 9.0

    def test_frame_roundtrip_preserves_containment(self):
        rng = np.random.default_rng(6)
        box = random_box(rng)
        pts = rng.uniform(-3, 3, size=(200, 4))
        inside = contains_points(box, pts)
        local = world_to_box_frame(box, pts)
        axis_box = Box3D(0, 0, 0, box.w, box.l, box.h, 0)
        np.testing.assert_array_equal(contains_points(axis_box, local), inside)
