"""Coordinate machinery shared by the simulator, model, and evaluator.

Conventions, fixed once and used everywhere:

  * radar frame: x forward, y left, z up (right-handed)
  * spherical point: (range_m, elevation_rad, azimuth_rad)
  * camera frame: z forward (optical axis), x right, y down
  * yaw: rotation about +z, zero along +x

Grid axes follow the node convention: bin i of an n-bin axis sits at
lo + i * (hi - lo) / (n - 1), so normalized coordinate u in [0, 1] maps
onto grid index u * (n - 1) and the span endpoints land exactly on the
first and last bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation


class GeometryError(ValueError):
    """Invalid grid, camera, or box construction."""


# ---------------------------------------------------------------------------
# spherical grid


@dataclass(frozen=True)
class SphericalGrid:
    """Physical spans and bin counts of the radar's (R, E, A) lattice."""

    range_span: Tuple[float, float] = (0.0, 80.0)
    elevation_span: Tuple[float, float] = (-math.radians(15.0), math.radians(15.0))
    azimuth_span: Tuple[float, float] = (-math.radians(60.0), math.radians(60.0))
    extents: Tuple[int, int, int] = (64, 16, 64)

    def __post_init__(self):
        for name, (lo, hi) in (
            ("range_span", self.range_span),
            ("elevation_span", self.elevation_span),
            ("azimuth_span", self.azimuth_span),
        ):
            if not hi > lo:
                raise GeometryError(f"{name} must be increasing, got ({lo}, {hi})")
        if any(n < 1 for n in self.extents):
            raise GeometryError(f"extents must be >= 1, got {self.extents}")

    @property
    def spans(self) -> np.ndarray:
        return np.array(
            [self.range_span, self.elevation_span, self.azimuth_span], dtype=np.float64
        )

    def _axis(self, lo: float, hi: float, n: int) -> np.ndarray:
        if n == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, n)

    def range_axis(self) -> np.ndarray:
        return self._axis(*self.range_span, self.extents[0])

    def elevation_axis(self) -> np.ndarray:
        return self._axis(*self.elevation_span, self.extents[1])

    def azimuth_axis(self) -> np.ndarray:
        return self._axis(*self.azimuth_span, self.extents[2])

    def contains(self, p_sph: np.ndarray) -> np.ndarray:
        """Elementwise FoV membership for (..., 3) spherical points."""
        p = np.asarray(p_sph, dtype=np.float64)
        lo = self.spans[:, 0]
        hi = self.spans[:, 1]
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def clamp(self, p_sph: np.ndarray) -> np.ndarray:
        """Clip spherical points into the FoV spans."""
        p = np.asarray(p_sph, dtype=np.float64)
        return np.clip(p, self.spans[:, 0], self.spans[:, 1])

    def to_json_dict(self) -> dict:
        return {
            "range_span": list(self.range_span),
            "elevation_span": list(self.elevation_span),
            "azimuth_span": list(self.azimuth_span),
            "extents": list(self.extents),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SphericalGrid":
        return cls(
            range_span=tuple(d["range_span"]),
            elevation_span=tuple(d["elevation_span"]),
            azimuth_span=tuple(d["azimuth_span"]),
            extents=tuple(int(n) for n in d["extents"]),
        )


def spherical_to_cartesian(p_sph) -> np.ndarray:
    """(range, elevation, azimuth) -> (x, y, z), vectorized over leading dims."""
    p = np.asarray(p_sph, dtype=np.float64)
    r, el, az = p[..., 0], p[..., 1], p[..., 2]
    ce = np.cos(el)
    return np.stack([r * ce * np.cos(az), r * ce * np.sin(az), r * np.sin(el)], axis=-1)


def cartesian_to_spherical(p_xyz) -> np.ndarray:
    """Inverse of spherical_to_cartesian; azimuth undefined at the pole maps to 0."""
    p = np.asarray(p_xyz, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore"):
        el = np.where(r > 0.0, np.arcsin(np.clip(np.divide(z, np.where(r > 0, r, 1.0)), -1.0, 1.0)), 0.0)
    az = np.arctan2(y, x)
    return np.stack([r, el, az], axis=-1)


def normalize_to_level(p_sph, grid: SphericalGrid) -> np.ndarray:
    """Affine map of spherical points from the grid spans onto [0,1]^3.

    The samplers scale unit coordinates by (extent - 1) per axis, so the
    composition places span endpoints exactly on the first and last bins
    of any pyramid level.
    """
    p = np.asarray(p_sph, dtype=np.float64)
    lo = grid.spans[:, 0]
    hi = grid.spans[:, 1]
    return (p - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# camera


def _default_radar_to_cam() -> np.ndarray:
    # cam x = -y (right), cam y = -z (down), cam z = +x (forward)
    return np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class CameraModel:
    """Pinhole camera rigidly mounted in the radar frame.

    `rotation` and `translation` map radar-frame points into the camera
    frame: p_cam = R @ p + t.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray = field(default_factory=_default_radar_to_cam)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise GeometryError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise GeometryError(f"extrinsic rotation not orthonormal (err {err:.2e})")

    @classmethod
    def standard(cls, image_size: Tuple[int, int] = (64, 64), focal_scale: float = 0.6) -> "CameraModel":
        """Forward-looking camera at the radar origin, centered principal point."""
        H, W = image_size
        f = focal_scale * W
        K = np.array([[f, 0.0, (W - 1) / 2.0], [0.0, f, (H - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(intrinsics=K, image_size=(H, W))

    def to_camera(self, p_xyz) -> np.ndarray:
        p = np.asarray(p_xyz, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def project(self, p_xyz, eps: float = 1e-9):
        """Radar-frame points -> pixel coords.

        Returns (uv, valid): uv is (..., 2) as (u, v); valid is false for
        points at or behind the camera plane or projecting off-image.
        """
        pc = self.to_camera(p_xyz)
        z = pc[..., 2]
        in_front = z > eps
        zsafe = np.where(in_front, z, 1.0)
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        u = fx * pc[..., 0] / zsafe + cx
        v = fy * pc[..., 1] / zsafe + cy
        H, W = self.image_size
        inside = (u >= 0.0) & (u <= W - 1.0) & (v >= 0.0) & (v <= H - 1.0)
        uv = np.stack([u, v], axis=-1)
        return uv, in_front & inside

    def to_json_dict(self) -> dict:
        quat = Rotation.from_matrix(self.rotation).as_quat()  # (x, y, z, w)
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation_quaternion_xyzw": quat.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraModel":
        rot = Rotation.from_quat(d["rotation_quaternion_xyzw"]).as_matrix()
        return cls(
            intrinsics=np.array(d["intrinsics"]),
            rotation=rot,
            translation=np.array(d["translation"]),
            image_size=tuple(int(n) for n in d["image_size"]),
        )


def project_to_image(p_xyz, cam: CameraModel):
    """Functional wrapper around CameraModel.project."""
    return cam.project(p_xyz)


# ---------------------------------------------------------------------------
# oriented boxes


@dataclass
class Box3D:
    """Yaw-oriented 3D box: center (x,y,z), size (l,w,h), yaw about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        if not np.all(self.size > 0):
            raise GeometryError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score must be in [0,1], got {self.score}")

    def corners_bev(self) -> np.ndarray:
        """Footprint corners (4, 2) in counter-clockwise order."""
        l, w = self.size[0], self.size[1]
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners_3d(self) -> np.ndarray:
        """All 8 corners (8, 3); bottom face first, CCW as in corners_bev."""
        bev = self.corners_bev()
        zlo = self.center[2] - self.size[2] / 2
        zhi = self.center[2] + self.size[2] / 2
        bottom = np.column_stack([bev, np.full(4, zlo)])
        top = np.column_stack([bev, np.full(4, zhi)])
        return np.vstack([bottom, top])

    def z_interval(self) -> Tuple[float, float]:
        h = self.size[2]
        return self.center[2] - h / 2, self.center[2] + h / 2

    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_json_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "score": float(self.score),
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "yaw": self.yaw,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Box3D":
        return cls(
            center=np.array(d["center"]),
            size=np.array(d["size"]),
            yaw=float(d["yaw"]),
            class_id=int(d.get("class_id", 0)),
            score=float(d.get("score", 1.0)),
        )


# ---------------------------------------------------------------------------
# rotated IoU via convex polygon clipping

_DEGENERATE_AREA = 1e-12


def _poly_area(poly: np.ndarray) -> float:
    """Shoelace area, positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` by convex CCW polygon `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for cur in inputs:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # edge crossing: solve for the intersection parameter
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if abs(denom) > 1e-300:
                    t = (ey * (prev[0] - ax) - ex * (prev[1] - ay)) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def intersection_area_bev(a: Box3D, b: Box3D) -> float:
    inter = _clip_polygon(a.corners_bev(), b.corners_bev())
    area = _poly_area(inter)
    return area if area > _DEGENERATE_AREA else 0.0


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprints."""
    inter = intersection_area_bev(a, b)
    if inter == 0.0:
        return 0.0
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU; boxes rotate about the gravity axis only."""
    inter_bev = intersection_area_bev(a, b)
    if inter_bev == 0.0:
        return 0.0
    alo, ahi = a.z_interval()
    blo, bhi = b.z_interval()
    dz = min(ahi, bhi) - max(alo, blo)
    if dz <= 0.0:
        return 0.0
    inter = inter_bev * dz
    union = a.volume() + b.volume() - inter
    return inter / union if union > 0 else 0.0
