"""Synthetic radar-spectrum and camera-image generator.

Scenes hold a handful of parameterized objects; rendering turns them
into a dense 4D power tesseract (Doppler x Range x Elevation x Azimuth)
plus a small RGB frame. Each object contributes a separable Gaussian
power blob centered at its spherical/Doppler bin; clutter is Rayleigh
over linear power. Everything is a pure function of (scene, grid, seed),
so frames can be rendered in parallel and byte-compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    CameraModel,
    SphericalGrid,
    cartesian_to_spherical,
)


class SceneError(ValueError):
    """Scene violates the grid's field of view or basic invariants."""


@dataclass
class SceneObject:
    """One reflector: pose, extent, motion, and return strength."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    radial_velocity: float = 0.0
    reflectivity: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        if not np.all(self.size > 0):
            raise SceneError(f"object size must be positive, got {self.size}")
        if not -math.pi < self.yaw <= math.pi:
            raise SceneError(f"yaw must lie in (-pi, pi], got {self.yaw}")
        if self.reflectivity <= 0:
            raise SceneError("reflectivity must be positive")

    def to_json_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "yaw": self.yaw,
            "radial_velocity": self.radial_velocity,
            "reflectivity": self.reflectivity,
            "class_id": int(self.class_id),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneObject":
        return cls(
            center=np.array(d["center"]),
            size=np.array(d["size"]),
            yaw=float(d["yaw"]),
            radial_velocity=float(d.get("radial_velocity", 0.0)),
            reflectivity=float(d.get("reflectivity", 1.0)),
            class_id=int(d.get("class_id", 0)),
        )


@dataclass
class Scene:
    """Objects plus clutter level, validated against a radar FoV."""

    objects: List[SceneObject]
    noise_floor: float
    seed: int
    grid: SphericalGrid = field(default_factory=SphericalGrid)

    def __post_init__(self):
        if self.noise_floor < 0:
            raise SceneError("noise_floor must be >= 0")
        for i, obj in enumerate(self.objects):
            sph = cartesian_to_spherical(obj.center)
            if not bool(self.grid.contains(sph)):
                raise SceneError(
                    f"object {i} center {obj.center.tolist()} outside the radar FoV "
                    f"(spherical {sph.tolist()})"
                )


@dataclass
class SpectrumTesseract:
    """Dense 4D linear-power array with physical bin axes."""

    power: np.ndarray  # (D, R, E, A), non-negative
    doppler_mps: np.ndarray
    range_m: np.ndarray
    elevation_rad: np.ndarray
    azimuth_rad: np.ndarray

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.power.shape


def doppler_axis(bins: int, span: Tuple[float, float] = (-16.0, 16.0)) -> np.ndarray:
    lo, hi = span
    if bins == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, bins)


def _axis_bin(value: float, axis: np.ndarray) -> float:
    """Continuous bin coordinate of a physical value on a node axis."""
    if len(axis) == 1:
        return 0.0
    step = (axis[-1] - axis[0]) / (len(axis) - 1)
    return float((value - axis[0]) / step)


def render_spectrum(
    scene: Scene,
    grid: Optional[SphericalGrid] = None,
    doppler_bins: int = 32,
    doppler_span: Tuple[float, float] = (-16.0, 16.0),
    sigma_bins: float = 1.5,
) -> SpectrumTesseract:
    """Rasterize a scene into a 4D power tesseract.

    Each object adds an outer product of four 1D Gaussians (width
    `sigma_bins` in bin units) centered on its Doppler/range/elevation/
    azimuth bin, with amplitude reflectivity / range^2. Rayleigh clutter
    at scale `noise_floor` is added when the floor is positive.
    """
    grid = grid if grid is not None else scene.grid
    R, E, A = grid.extents
    D = doppler_bins
    d_axis = doppler_axis(D, doppler_span)
    r_axis = grid.range_axis()
    e_axis = grid.elevation_axis()
    a_axis = grid.azimuth_axis()

    power = np.zeros((D, R, E, A))
    two_s2 = 2.0 * sigma_bins * sigma_bins
    for obj in scene.objects:
        sph = cartesian_to_spherical(obj.center)
        rng_m = float(sph[0])
        bd = np.clip(_axis_bin(obj.radial_velocity, d_axis), 0.0, D - 1.0)
        br = _axis_bin(rng_m, r_axis)
        be = _axis_bin(float(sph[1]), e_axis)
        ba = _axis_bin(float(sph[2]), a_axis)
        amp = obj.reflectivity / max(rng_m, 1e-6) ** 2
        gd = np.exp(-((np.arange(D) - bd) ** 2) / two_s2)
        gr = np.exp(-((np.arange(R) - br) ** 2) / two_s2)
        ge = np.exp(-((np.arange(E) - be) ** 2) / two_s2)
        ga = np.exp(-((np.arange(A) - ba) ** 2) / two_s2)
        blob = np.einsum("d,r,e,a->drea", gd, gr, ge, ga)
        power += amp * blob

    if scene.noise_floor > 0:
        rng = np.random.default_rng(scene.seed)
        power += rng.rayleigh(scale=scene.noise_floor, size=power.shape)

    return SpectrumTesseract(
        power=power,
        doppler_mps=d_axis,
        range_m=r_axis,
        elevation_rad=e_axis,
        azimuth_rad=a_axis,
    )


# Fixed per-class fill colors (RGB in [0,1]); cycles past the palette end.
CLASS_PALETTE: Sequence[Tuple[float, float, float]] = (
    (0.85, 0.25, 0.25),
    (0.25, 0.45, 0.85),
    (0.25, 0.70, 0.35),
    (0.85, 0.65, 0.20),
    (0.60, 0.30, 0.70),
    (0.20, 0.70, 0.70),
)

BACKGROUND_GRAY = 0.12


def render_image(scene: Scene, cam: CameraModel) -> np.ndarray:
    """Paint each visible object as a filled class-colored rectangle.

    Objects are drawn far-to-near so closer ones occlude. The rectangle
    is the axis-aligned bound of the projected 3D corners, clipped to
    the frame. Objects with any corner behind the camera are skipped.
    Returns a (3, H, W) float array in [0, 1].
    """
    H, W = cam.image_size
    img = np.full((3, H, W), BACKGROUND_GRAY)

    from .geometry import Box3D  # local import avoids a cycle at module load

    depths = []
    for obj in scene.objects:
        depths.append(cam.to_camera(obj.center)[2])
    order = sorted(range(len(scene.objects)), key=lambda i: -depths[i])

    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    for i in order:
        obj = scene.objects[i]
        box = Box3D(center=obj.center, size=obj.size, yaw=obj.yaw,
                    class_id=obj.class_id)
        pc = cam.to_camera(box.corners_3d())
        if np.any(pc[:, 2] <= 1e-9):
            continue
        u = fx * pc[:, 0] / pc[:, 2] + cx
        v = fy * pc[:, 1] / pc[:, 2] + cy
        u0 = max(int(math.floor(u.min())), 0)
        u1 = min(int(math.ceil(u.max())), W - 1)
        v0 = max(int(math.floor(v.min())), 0)
        v1 = min(int(math.ceil(v.max())), H - 1)
        if u0 > u1 or v0 > v1:
            continue
        color = CLASS_PALETTE[obj.class_id % len(CLASS_PALETTE)]
        for c in range(3):
            img[c, v0 : v1 + 1, u0 : u1 + 1] = color[c]
    return img
