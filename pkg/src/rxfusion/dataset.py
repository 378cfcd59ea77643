"""Dataset synthesis and frame IO.

Directory layout:

    <root>/
      meta.json                 dataset-level config echo
      split.json                {"train": [...], "val": [...], "test": [...]}
      frames/<id>/spectrum.rxt  (D, R, E, A) power tesseract
      frames/<id>/image.rxt     (3, H, W) RGB in [0, 1]
      frames/<id>/labels.json   objects + calibration + clutter level

Frame <id> content depends only on (master seed, frame index, config),
via independently spawned SeedSequence children, so generation order and
worker count never change the bytes on disk.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .containers import read_rxt, write_rxt
from .geometry import Box3D, CameraModel, SphericalGrid, spherical_to_cartesian
from .simulate import Scene, SceneObject, doppler_axis, render_image, render_spectrum

# (l, w, h) meters and a reflectivity scale per class; jittered per object.
# Reflectivities are sized so the weakest class at the far placement edge
# still clears the clutter floor by an order of magnitude after the 1/r^2
# range rolloff.
CLASS_SIZES: Sequence[Tuple[float, float, float]] = (
    (4.2, 1.9, 1.6),
    (6.0, 2.4, 2.3),
    (0.8, 0.7, 1.7),
    (2.2, 0.9, 1.4),
)
CLASS_REFLECTIVITY: Sequence[float] = (300.0, 500.0, 120.0, 180.0)


@dataclass
class DatasetConfig:
    out_dir: str = "dataset"
    n_train: int = 200
    n_val: int = 0
    n_test: int = 50
    seed: int = 0
    max_objects: int = 3
    n_classes: int = 2
    noise_floor: float = 0.01
    doppler_bins: int = 32
    doppler_span: Tuple[float, float] = (-16.0, 16.0)
    sigma_bins: float = 1.5
    image_size: Tuple[int, int] = (64, 64)
    grid: SphericalGrid = field(default_factory=SphericalGrid)
    # object placement margins, as fractions of each span
    range_frac: Tuple[float, float] = (0.15, 0.85)
    azimuth_frac: float = 0.6
    elevation_frac: float = 0.35
    size_jitter: float = 0.15
    # half-width of the uniform yaw distribution; pi covers all headings
    yaw_limit: float = math.pi

    @property
    def n_frames(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_json_dict(self) -> dict:
        d = asdict(self)
        # the output path is where the dataset happens to live, not part of
        # its identity; keeping it out makes meta.json location-independent
        d.pop("out_dir")
        d["grid"] = self.grid.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = SphericalGrid.from_json_dict(d["grid"])
        for key in ("doppler_span", "image_size", "range_frac"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sample_scene(cfg: DatasetConfig, rng: np.random.Generator, seed: int) -> Scene:
    """Draw one random scene consistent with the config's placement rules."""
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    r_lo, r_hi = cfg.grid.range_span
    e_lo, e_hi = cfg.grid.elevation_span
    a_lo, a_hi = cfg.grid.azimuth_span
    e_mid, e_half = (e_lo + e_hi) / 2, (e_hi - e_lo) / 2
    a_mid, a_half = (a_lo + a_hi) / 2, (a_hi - a_lo) / 2
    d_hi = 0.8 * max(abs(cfg.doppler_span[0]), abs(cfg.doppler_span[1]))

    objects = []
    for _ in range(n_obj):
        r = r_lo + (r_hi - r_lo) * rng.uniform(*cfg.range_frac)
        az = a_mid + a_half * cfg.azimuth_frac * rng.uniform(-1, 1)
        el = e_mid + e_half * cfg.elevation_frac * rng.uniform(-1, 1)
        center = spherical_to_cartesian(np.array([r, el, az]))
        class_id = int(rng.integers(0, cfg.n_classes))
        base = np.array(CLASS_SIZES[class_id % len(CLASS_SIZES)])
        size = base * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
        yaw = float(rng.uniform(-cfg.yaw_limit, cfg.yaw_limit))
        if yaw <= -math.pi:
            yaw = math.pi
        refl_base = CLASS_REFLECTIVITY[class_id % len(CLASS_REFLECTIVITY)]
        objects.append(
            SceneObject(
                center=center,
                size=size,
                yaw=yaw,
                radial_velocity=float(rng.uniform(-d_hi, d_hi)),
                reflectivity=float(refl_base * rng.uniform(0.7, 1.3)),
                class_id=class_id,
            )
        )
    return Scene(objects=objects, noise_floor=cfg.noise_floor, seed=seed, grid=cfg.grid)


def _frame_id(index: int) -> str:
    return f"{index:06d}"


def calibration_dict(cfg: DatasetConfig, cam: CameraModel) -> dict:
    return {
        "camera": cam.to_json_dict(),
        "grid": cfg.grid.to_json_dict(),
        "doppler": {"bins": cfg.doppler_bins, "span": list(cfg.doppler_span)},
    }


def generate_frame(cfg: DatasetConfig, index: int) -> None:
    """Render and persist a single frame; safe to call from any worker."""
    master = np.random.SeedSequence(cfg.seed)
    child = master.spawn(cfg.n_frames)[index]
    rng = np.random.default_rng(child)
    clutter_seed = int(rng.integers(0, 2**63 - 1))
    scene = sample_scene(cfg, rng, seed=clutter_seed)

    cam = CameraModel.standard(image_size=cfg.image_size)
    spec = render_spectrum(
        scene,
        cfg.grid,
        doppler_bins=cfg.doppler_bins,
        doppler_span=cfg.doppler_span,
        sigma_bins=cfg.sigma_bins,
    )
    img = render_image(scene, cam)

    fid = _frame_id(index)
    frame_dir = Path(cfg.out_dir) / "frames" / fid
    frame_dir.mkdir(parents=True, exist_ok=True)
    write_rxt(frame_dir / "spectrum.rxt", spec.power)
    write_rxt(frame_dir / "image.rxt", img)
    labels = {
        "frame_id": fid,
        "objects": [o.to_json_dict() for o in scene.objects],
        "noise_floor": scene.noise_floor,
        "clutter_seed": clutter_seed,
        "calibration": calibration_dict(cfg, cam),
    }
    _dump_json(frame_dir / "labels.json", labels)


def make_dataset(cfg: DatasetConfig, jobs: int = 1) -> Path:
    """Generate all frames plus split.json and meta.json; returns the root."""
    if cfg.n_frames < 1:
        raise ValueError("dataset needs at least one frame")
    root = Path(cfg.out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)

    indices = list(range(cfg.n_frames))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_generate_frame_star, [(cfg, i) for i in indices], chunksize=8))
    else:
        for i in indices:
            generate_frame(cfg, i)

    ids = [_frame_id(i) for i in indices]
    order = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(cfg.n_frames + 1)[-1]).permutation(
        cfg.n_frames
    )
    shuffled = [ids[i] for i in order]
    split = {
        "train": sorted(shuffled[: cfg.n_train]),
        "val": sorted(shuffled[cfg.n_train : cfg.n_train + cfg.n_val]),
        "test": sorted(shuffled[cfg.n_train + cfg.n_val :]),
    }
    _dump_json(root / "split.json", split)
    _dump_json(root / "meta.json", cfg.to_json_dict())
    return root


def _generate_frame_star(args) -> None:
    cfg, index = args
    generate_frame(cfg, index)


# ---------------------------------------------------------------------------
# loading


@dataclass
class Frame:
    frame_id: str
    spectrum: np.ndarray  # (D, R, E, A)
    image: np.ndarray  # (3, H, W)
    boxes: List[Box3D]
    labels: dict
    grid: SphericalGrid
    camera: CameraModel
    doppler_bins: int
    doppler_span: Tuple[float, float]

    def doppler_axis(self) -> np.ndarray:
        return doppler_axis(self.doppler_bins, self.doppler_span)


def load_labels(frame_dir: Path) -> dict:
    return json.loads((Path(frame_dir) / "labels.json").read_text())


def boxes_from_labels(labels: dict) -> List[Box3D]:
    out = []
    for o in labels["objects"]:
        out.append(
            Box3D(
                center=np.array(o["center"]),
                size=np.array(o["size"]),
                yaw=float(o["yaw"]),
                class_id=int(o["class_id"]),
                score=1.0,
            )
        )
    return out


def load_frame(frame_dir, with_spectrum: bool = True, with_image: bool = True) -> Frame:
    frame_dir = Path(frame_dir)
    labels = load_labels(frame_dir)
    calib = labels["calibration"]
    grid = SphericalGrid.from_json_dict(calib["grid"])
    cam = CameraModel.from_json_dict(calib["camera"])
    spec = read_rxt(frame_dir / "spectrum.rxt") if with_spectrum else np.zeros(0)
    img = read_rxt(frame_dir / "image.rxt") if with_image else np.zeros(0)
    return Frame(
        frame_id=labels["frame_id"],
        spectrum=spec,
        image=img,
        boxes=boxes_from_labels(labels),
        labels=labels,
        grid=grid,
        camera=cam,
        doppler_bins=int(calib["doppler"]["bins"]),
        doppler_span=tuple(calib["doppler"]["span"]),
    )


def read_split(root) -> Dict[str, List[str]]:
    return json.loads((Path(root) / "split.json").read_text())


def split_frame_dirs(root, split_name: str) -> List[Path]:
    root = Path(root)
    ids = read_split(root)[split_name]
    return [root / "frames" / fid for fid in ids]


def all_frame_dirs(root) -> List[Path]:
    root = Path(root)
    return sorted((root / "frames").iterdir())
