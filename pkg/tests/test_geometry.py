"""Coordinate transforms, grids, cameras, and rotated-box IoU."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rxfusion.geometry import (
    Box3D,
    CameraModel,
    GeometryError,
    SphericalGrid,
    _poly_area,
    cartesian_to_spherical,
    intersection_area_bev,
    iou_3d,
    iou_bev,
    normalize_to_level,
    spherical_to_cartesian,
)


def mc_iou(a: Box3D, b: Box3D, rng, n=200_000, bev=False) -> float:
    """Monte-Carlo IoU oracle: rejection sampling over the joint bound."""
    corners = np.vstack([a.corners_3d(), b.corners_3d()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    if bev:
        pts[:, 2] = (a.z_interval()[0] + a.z_interval()[1]) / 2.0
        b = Box3D(
            center=[b.center[0], b.center[1], a.center[2]], size=b.size, yaw=b.yaw
        )

    def inside(box, p):
        d = p[:, :2] - box.center[:2]
        c, s = math.cos(-box.yaw), math.sin(-box.yaw)
        local = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]], axis=1)
        ok = (np.abs(local[:, 0]) <= box.size[0] / 2) & (
            np.abs(local[:, 1]) <= box.size[1] / 2
        )
        if not bev:
            zlo, zhi = box.z_interval()
            ok &= (p[:, 2] >= zlo) & (p[:, 2] <= zhi)
        return ok

    in_a = inside(a, pts)
    in_b = inside(b, pts)
    union = (in_a | in_b).sum()
    return float((in_a & in_b).sum() / union) if union else 0.0


class TestSphericalTransforms:
    def test_round_trip_random_points(self, rng):
        sph = np.stack(
            [
                rng.uniform(0.5, 60.0, 100),
                rng.uniform(-1.3, 1.3, 100),
                rng.uniform(-3.0, 3.0, 100),
            ],
            axis=-1,
        )
        back = cartesian_to_spherical(spherical_to_cartesian(sph))
        assert_allclose(back, sph, atol=1e-12)

    def test_known_directions(self):
        assert_allclose(spherical_to_cartesian([2.0, 0.0, 0.0]), [2.0, 0.0, 0.0])
        assert_allclose(
            spherical_to_cartesian([3.0, math.pi / 2, 0.0]), [0.0, 0.0, 3.0], atol=1e-15
        )
        assert_allclose(
            spherical_to_cartesian([1.0, 0.0, math.pi / 2]), [0.0, 1.0, 0.0], atol=1e-15
        )

    def test_origin_maps_to_zero(self):
        assert_allclose(cartesian_to_spherical([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])


class TestSphericalGrid:
    def test_axes_hit_span_endpoints(self, small_grid):
        r = small_grid.range_axis()
        assert_allclose([r[0], r[-1]], small_grid.range_span)
        assert len(r) == small_grid.extents[0]

    def test_single_bin_axis_is_span_center(self):
        g = SphericalGrid(extents=(1, 1, 1))
        assert_allclose(g.range_axis(), [40.0])

    def test_contains_and_clamp(self, small_grid):
        inside = np.array([10.0, 0.0, 0.0])
        outside = np.array([50.0, 0.0, 2.0])
        assert bool(small_grid.contains(inside))
        assert not bool(small_grid.contains(outside))
        clamped = small_grid.clamp(outside)
        assert bool(small_grid.contains(clamped))
        assert_allclose(clamped, [34.0, 0.0, 0.6])

    def test_normalize_to_level_endpoints(self, small_grid):
        lo = np.array([2.0, -0.25, -0.6])
        hi = np.array([34.0, 0.25, 0.6])
        assert_allclose(normalize_to_level(lo, small_grid), [0, 0, 0], atol=1e-15)
        assert_allclose(normalize_to_level(hi, small_grid), [1, 1, 1], atol=1e-15)

    def test_decreasing_span_rejected(self):
        with pytest.raises(GeometryError):
            SphericalGrid(range_span=(10.0, 5.0))

    def test_json_round_trip(self, small_grid):
        back = SphericalGrid.from_json_dict(small_grid.to_json_dict())
        assert back == small_grid


class TestCameraModel:
    def test_center_point_projects_to_principal_point(self):
        cam = CameraModel.standard(image_size=(48, 64))
        uv, valid = cam.project(np.array([[10.0, 0.0, 0.0]]))
        assert valid[0]
        assert_allclose(uv[0], [(64 - 1) / 2, (48 - 1) / 2])

    def test_left_maps_to_smaller_u(self):
        # radar +y is left; camera u grows to the right
        cam = CameraModel.standard()
        uv, valid = cam.project(np.array([[10.0, 1.0, 0.0], [10.0, -1.0, 0.0]]))
        assert valid.all()
        assert uv[0, 0] < uv[1, 0]

    def test_behind_camera_invalid(self):
        cam = CameraModel.standard()
        _, valid = cam.project(np.array([[-5.0, 0.0, 0.0]]))
        assert not valid[0]

    def test_off_image_invalid(self):
        cam = CameraModel.standard(image_size=(32, 32))
        _, valid = cam.project(np.array([[1.0, 30.0, 0.0]]))
        assert not valid[0]

    def test_non_orthonormal_rotation_rejected(self):
        K = np.eye(3) * 10.0
        K[2, 2] = 1.0
        with pytest.raises(GeometryError, match="orthonormal"):
            CameraModel(intrinsics=K, rotation=np.eye(3) * 1.001)

    def test_json_round_trip(self):
        cam = CameraModel.standard(image_size=(40, 56), focal_scale=0.8)
        back = CameraModel.from_json_dict(cam.to_json_dict())
        assert_allclose(back.intrinsics, cam.intrinsics)
        assert_allclose(back.rotation, cam.rotation, atol=1e-12)
        assert back.image_size == cam.image_size


class TestBox3D:
    def test_bev_corners_ccw_with_correct_area(self, rng):
        for _ in range(20):
            box = Box3D(
                center=rng.normal(size=3),
                size=rng.uniform(0.5, 4.0, 3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            area = _poly_area(box.corners_bev())
            assert area > 0  # counter-clockwise
            assert_allclose(area, box.size[0] * box.size[1], rtol=1e-12)

    def test_corner_layout_axis_aligned(self):
        box = Box3D(center=[0, 0, 1], size=[4, 2, 2], yaw=0.0)
        c = box.corners_3d()
        assert c.shape == (8, 3)
        assert_allclose(c[:4, 2], 0.0)
        assert_allclose(c[4:, 2], 2.0)
        assert_allclose(c[0, :2], [2.0, 1.0])

    def test_yaw_rotates_footprint(self):
        box = Box3D(center=[0, 0, 0], size=[4, 2, 1], yaw=math.pi / 2)
        bev = box.corners_bev()
        assert_allclose(np.abs(bev[:, 0]).max(), 1.0, atol=1e-12)
        assert_allclose(np.abs(bev[:, 1]).max(), 2.0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(GeometryError):
            Box3D(center=[0, 0, 0], size=[1, -1, 1], yaw=0.0)
        with pytest.raises(GeometryError):
            Box3D(center=[0, 0, 0], size=[1, 1, 1], yaw=0.0, score=1.5)

    def test_json_round_trip(self):
        box = Box3D(center=[1, 2, 3], size=[4, 2, 1], yaw=0.3, class_id=1, score=0.5)
        back = Box3D.from_json_dict(box.to_json_dict())
        assert_allclose(back.center, box.center)
        assert back.class_id == 1 and back.score == 0.5


class TestIoU:
    def test_hand_case_offset_squares(self):
        # 2x2 squares shifted by 1 along one axis: inter 2, union 6
        a = Box3D(center=[0, 0, 0], size=[2, 2, 2], yaw=0.0)
        b = Box3D(center=[1, 0, 0], size=[2, 2, 2], yaw=0.0)
        assert_allclose(iou_bev(a, b), 1.0 / 3.0, atol=1e-12)

    def test_hand_case_diagonal_offset(self):
        # shifting on both axes: inter 1, union 7
        a = Box3D(center=[0, 0, 0], size=[2, 2, 2], yaw=0.0)
        b = Box3D(center=[1, 1, 0], size=[2, 2, 2], yaw=0.0)
        assert_allclose(iou_bev(a, b), 1.0 / 7.0, atol=1e-12)

    def test_identical_boxes(self):
        a = Box3D(center=[3, -1, 0.5], size=[4, 2, 1.5], yaw=0.7)
        assert_allclose(iou_bev(a, a), 1.0, atol=1e-12)
        assert_allclose(iou_3d(a, a), 1.0, atol=1e-12)

    def test_disjoint_boxes(self):
        a = Box3D(center=[0, 0, 0], size=[1, 1, 1], yaw=0.2)
        b = Box3D(center=[10, 0, 0], size=[1, 1, 1], yaw=-0.4)
        assert iou_bev(a, b) == 0.0
        assert iou_3d(a, b) == 0.0

    def test_z_separation_kills_3d_only(self):
        a = Box3D(center=[0, 0, 0], size=[2, 2, 1], yaw=0.0)
        b = Box3D(center=[0, 0, 5], size=[2, 2, 1], yaw=0.0)
        assert iou_bev(a, b) == 1.0
        assert iou_3d(a, b) == 0.0

    def test_rotated_cross_exact(self):
        # two 4x1 bars crossed at 90 degrees: inter 1, union 7
        a = Box3D(center=[0, 0, 0], size=[4, 1, 1], yaw=0.0)
        b = Box3D(center=[0, 0, 0], size=[4, 1, 1], yaw=math.pi / 2)
        assert_allclose(iou_bev(a, b), 1.0 / 7.0, atol=1e-12)

    def test_diamond_in_square_exact(self):
        # unit square vs the same square rotated 45 degrees: the
        # intersection is a regular octagon with area 2*(sqrt(2)-1)
        a = Box3D(center=[0, 0, 0], size=[1, 1, 1], yaw=0.0)
        b = Box3D(center=[0, 0, 0], size=[1, 1, 1], yaw=math.pi / 4)
        inter = 2.0 * (math.sqrt(2.0) - 1.0)
        assert_allclose(intersection_area_bev(a, b), inter, atol=1e-12)
        assert_allclose(iou_bev(a, b), inter / (2.0 - inter), atol=1e-12)

    def test_containment(self):
        a = Box3D(center=[0, 0, 0], size=[4, 4, 4], yaw=0.3)
        b = Box3D(center=[0, 0, 0], size=[2, 2, 2], yaw=-0.9)
        assert_allclose(iou_3d(a, b), 8.0 / 64.0, atol=1e-12)

    def test_joint_rotation_invariance(self, rng):
        a = Box3D(center=[1, 0, 0], size=[3, 1.5, 1], yaw=0.2)
        b = Box3D(center=[1.8, 0.6, 0.2], size=[2.5, 1.2, 1.1], yaw=-0.5)
        base = iou_3d(a, b)
        for theta in rng.uniform(-math.pi, math.pi, 5):
            c, s = math.cos(theta), math.sin(theta)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            a2 = Box3D(center=rot @ a.center, size=a.size, yaw=a.yaw + theta)
            b2 = Box3D(center=rot @ b.center, size=b.size, yaw=b.yaw + theta)
            assert_allclose(iou_3d(a2, b2), base, atol=1e-12)

    def test_symmetry(self, rng):
        for _ in range(10):
            a = Box3D(
                center=rng.normal(size=3),
                size=rng.uniform(0.5, 3.0, 3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            b = Box3D(
                center=a.center + rng.normal(scale=0.8, size=3),
                size=rng.uniform(0.5, 3.0, 3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            assert_allclose(iou_bev(a, b), iou_bev(b, a), atol=1e-14)
            assert_allclose(iou_3d(a, b), iou_3d(b, a), atol=1e-14)

    def test_against_monte_carlo(self, rng):
        # a handful here; the wide sweep lives in the acceptance suite
        for _ in range(5):
            a = Box3D(
                center=rng.normal(size=3),
                size=rng.uniform(1.0, 3.0, 3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            b = Box3D(
                center=a.center + rng.normal(scale=0.7, size=3),
                size=rng.uniform(1.0, 3.0, 3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            est = mc_iou(a, b, rng, n=400_000)
            assert abs(iou_3d(a, b) - est) < 5e-3
