"""Cross-dimension deformable-attention fusion model.

Object queries live in the radar's spherical coordinate system. Each
decoder iteration runs multi-head self-attention over the queries, then
two deformable cross-attention reads: a trilinear one into the 3D radar
feature pyramid and a bilinear one into the 2D image pyramid at the
queries' camera projections. The two vectors are concatenated, pushed
through a fuser FFN with a residual connection, and decoded by four
per-query FFN branches (class, center offset, size, angle). Predicted
centers, detached from the gradient tape and clamped to the field of
view, become the next iteration's reference points.

Deformable attention follows the standard form: per head m, level l,
and sampling point k, a weight A[m,l,q,k] (softmax over l,k) multiplies
the value-projected feature sampled at phi_l(p_q) + delta_p[m,l,q,k].
Offsets are expressed in level-cell units; samples outside a level
contribute zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    ConfigError,
    PyramidConfig,
    PyramidEncoder,
    build_image_encoder,
    build_radar_encoder,
    check_extents,
)
from .geometry import (
    Box3D,
    CameraModel,
    SphericalGrid,
    cartesian_to_spherical,
    normalize_to_level,
    spherical_to_cartesian,
)
from .params import ParamStore, load_checkpoint, save_checkpoint


@dataclass
class QuerySet:
    """Query features paired with physical spherical reference points."""

    features: Tensor  # (N, C)
    ref_points: np.ndarray  # (N, 3) as (range, elevation, azimuth)


@dataclass
class IterationOutput:
    """Raw per-query head outputs for one refinement iteration."""

    logits: Tensor  # (N, n_classes + 1), background last
    center: Tensor  # (N, 3) Cartesian meters
    size: Tensor  # (N, 3) meters, positive
    sincos: Tensor  # (N, 2) unit-normalized (sin yaw, cos yaw)
    ref_points: np.ndarray  # (N, 3) spherical refs used this iteration


@dataclass
class ModelConfig:
    n_queries: int = 64
    n_heads: int = 4
    n_points: int = 4
    channels: int = 32
    n_iter: int = 4
    n_classes: int = 2
    aux_loss: bool = True
    fuse_hidden: int = 0  # 0 -> 2 * channels
    head_hidden: int = 0  # 0 -> channels
    input_scales: Tuple[float, float, float] = (0.01, 1e-4, 16.0)
    init_seed: int = 0
    grid: SphericalGrid = field(default_factory=SphericalGrid)
    radar_encoder: PyramidConfig = field(default_factory=PyramidConfig)
    image_encoder: PyramidConfig = field(default_factory=PyramidConfig)

    def __post_init__(self):
        if self.fuse_hidden <= 0:
            self.fuse_hidden = 2 * self.channels
        if self.head_hidden <= 0:
            self.head_hidden = self.channels
        if self.radar_encoder.levels != self.image_encoder.levels:
            raise ConfigError("radar and image pyramids must share level count")
        if self.radar_encoder.out_channels != self.channels:
            raise ConfigError("radar encoder out_channels must equal model channels")
        if self.image_encoder.out_channels != self.channels:
            raise ConfigError("image encoder out_channels must equal model channels")
        if self.channels % self.n_heads != 0:
            raise ConfigError("channels must divide evenly across heads")

    @property
    def levels(self) -> int:
        return self.radar_encoder.levels

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    def to_json_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_heads": self.n_heads,
            "n_points": self.n_points,
            "channels": self.channels,
            "n_iter": self.n_iter,
            "n_classes": self.n_classes,
            "aux_loss": self.aux_loss,
            "fuse_hidden": self.fuse_hidden,
            "head_hidden": self.head_hidden,
            "input_scales": list(self.input_scales),
            "init_seed": self.init_seed,
            "grid": self.grid.to_json_dict(),
            "radar_encoder": self.radar_encoder.to_json_dict(),
            "image_encoder": self.image_encoder.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["grid"] = SphericalGrid.from_json_dict(d["grid"])
        d["radar_encoder"] = PyramidConfig.from_json_dict(d["radar_encoder"])
        d["image_encoder"] = PyramidConfig.from_json_dict(d["image_encoder"])
        if "input_scales" in d:
            d["input_scales"] = tuple(d["input_scales"])
        return cls(**d)


# ---------------------------------------------------------------------------
# query lattice


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def lattice_counts(n: int) -> Tuple[int, int, int]:
    """Factor n into (range, elevation, azimuth) lattice extents.

    Picks the factorization closest to a cube, preferring few elevation
    rows (the elevation span is the narrowest) and then balanced
    range/azimuth counts.
    """
    croot = n ** (1.0 / 3.0)
    best = None
    best_key = None
    for ne in _divisors(n):
        rest = n // ne
        for nr in _divisors(rest):
            na = rest // nr
            score = (nr - croot) ** 2 + (ne - croot) ** 2 + (na - croot) ** 2
            key = (score, ne, abs(nr - na), -nr)
            if best_key is None or key < best_key:
                best_key = key
                best = (nr, ne, na)
    return best


def query_lattice(n: int, grid: SphericalGrid) -> np.ndarray:
    """Regular (N, 3) lattice of spherical points covering the FoV.

    Points sit at the centers of an (nr x ne x na) partition of the
    spans, so extremes stay half a lattice step inside the span ends.
    """
    if n < 1:
        raise ValueError("need at least one query")
    counts = lattice_counts(n)
    axes = []
    for (lo, hi), cnt in zip(grid.spans, counts):
        step = (hi - lo) / cnt
        axes.append(lo + step * (np.arange(cnt) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def init_queries(n: int, grid: SphericalGrid, features: Tensor) -> QuerySet:
    """Pair the FoV lattice with (learned) initial query features."""
    return QuerySet(features=features, ref_points=query_lattice(n, grid))


# ---------------------------------------------------------------------------
# model


class FusionModel:
    """Full radar-camera detector: encoders + iterative fusion decoder."""

    def __init__(self, config: ModelConfig):
        self.config = config
        check_extents(config.grid.extents, config.radar_encoder)
        self.store = ParamStore()
        rng = np.random.default_rng(config.init_seed)

        self.radar_encoder = build_radar_encoder(self.store, config.radar_encoder, rng)
        self.image_encoder = build_image_encoder(self.store, config.image_encoder, rng)

        C = config.channels
        N = config.n_queries
        M = config.n_heads
        L = config.levels
        K = config.n_points
        Cv = config.head_dim
        p = self.store

        p.uniform("query_embed", (N, C), C, rng)

        for name in ("wq", "wk", "wv", "wo"):
            p.uniform(f"mhsa/{name}", (C, C), C, rng)
            p.uniform(f"mhsa/{name}_b", (C,), C, rng)

        for branch, dim in (("msda3d", 3), ("msda2d", 2)):
            for m in range(M):
                p.uniform(f"{branch}/value{m}", (Cv, C), C, rng)
                p.uniform(f"{branch}/out{m}", (Cv, C), Cv, rng)
            p.uniform(f"{branch}/offset_w", (C, M * L * K * dim), C, rng)
            p.uniform(f"{branch}/offset_b", (M * L * K * dim,), C, rng)
            p.uniform(f"{branch}/weight_w", (C, M * L * K), C, rng)
            p.uniform(f"{branch}/weight_b", (M * L * K,), C, rng)

        H = config.fuse_hidden
        p.uniform("fuse/w1", (2 * C, H), 2 * C, rng)
        p.uniform("fuse/b1", (H,), 2 * C, rng)
        p.uniform("fuse/w2", (H, 2 * C), H, rng)
        p.uniform("fuse/b2", (2 * C,), H, rng)
        p.uniform("fuse/w3", (2 * C, C), 2 * C, rng)
        p.uniform("fuse/b3", (C,), 2 * C, rng)

        Hh = config.head_hidden
        for branch, out_dim in (
            ("class", config.n_classes + 1),
            ("center", 3),
            ("size", 3),
            ("angle", 2),
        ):
            p.uniform(f"head/{branch}/w1", (C, Hh), C, rng)
            p.uniform(f"head/{branch}/b1", (Hh,), C, rng)
            p.uniform(f"head/{branch}/w2", (Hh, out_dim), Hh, rng)
            p.uniform(f"head/{branch}/b2", (out_dim,), Hh, rng)
        # bias queries toward the background class at the start, so score
        # ordering comes from matched queries instead of init noise
        p["head/class/b2"].data[-1] += 2.0

        # permutation of the flattened (N*M*L*K) offset/weight layout into
        # (level, head, query, point) order, so one gather feeds all levels
        flat = np.arange(N * M * L * K).reshape(N, M, L, K)
        self._perm = np.ascontiguousarray(flat.transpose(2, 1, 0, 3)).reshape(-1)

    # -- input preparation --------------------------------------------------

    def prepare_cube(self, cube_values: np.ndarray) -> Tensor:
        """(R, E, A, 3) physical cube -> scaled channels-first input Tensor."""
        s_m, s_v, s_d = self.config.input_scales
        ch = np.empty_like(cube_values)
        ch[..., 0] = np.log1p(np.maximum(cube_values[..., 0], 0.0) / s_m)
        ch[..., 1] = np.log1p(np.maximum(cube_values[..., 1], 0.0) / s_v)
        ch[..., 2] = cube_values[..., 2] / s_d
        return Tensor(np.ascontiguousarray(np.moveaxis(ch, -1, 0)))

    def prepare_image(self, image: np.ndarray) -> Tensor:
        return Tensor(np.ascontiguousarray(image))

    # -- decoder pieces -----------------------------------------------------

    def _linear(self, x: Tensor, w_name: str, b_name: Optional[str] = None) -> Tensor:
        out = ad.matmul(x, self.store[w_name])
        if b_name is not None:
            out = out + self.store[b_name]
        return out

    def init_queries(self) -> QuerySet:
        return init_queries(
            self.config.n_queries, self.config.grid, self.store["query_embed"]
        )

    def self_attend(self, q: QuerySet) -> QuerySet:
        """Multi-head self-attention over query features, with residual."""
        cfg = self.config
        f = q.features
        Q = self._linear(f, "mhsa/wq", "mhsa/wq_b")
        K = self._linear(f, "mhsa/wk", "mhsa/wk_b")
        V = self._linear(f, "mhsa/wv", "mhsa/wv_b")
        dh = cfg.head_dim
        heads = []
        for m in range(cfg.n_heads):
            qm = ad.narrow(Q, 1, m * dh, dh)
            km = ad.narrow(K, 1, m * dh, dh)
            vm = ad.narrow(V, 1, m * dh, dh)
            scores = ad.matmul(qm, ad.transpose(km, (1, 0))) * (1.0 / math.sqrt(dh))
            heads.append(ad.matmul(ad.softmax(scores, axis=-1), vm))
        out = self._linear(ad.concat(heads, axis=1), "mhsa/wo", "mhsa/wo_b")
        return QuerySet(features=f + out, ref_points=q.ref_points)

    def _head_mats(self, branch: str) -> List[Tensor]:
        """Per-head combined read-out matrices value_m^T @ out_m, shape (C, C).

        Both maps are linear, so projecting sampled vectors through the
        product equals projecting the level maps first and applying the
        output map after; combining them once per forward avoids touching
        every level cube per head.
        """
        mats = []
        for m in range(self.config.n_heads):
            vt = ad.transpose(self.store[f"{branch}/value{m}"], (1, 0))
            mats.append(ad.matmul(vt, self.store[f"{branch}/out{m}"]))
        return mats

    def _msda(
        self,
        f_q: Tensor,
        levels: Sequence[Tensor],
        base_per_level: List[np.ndarray],
        branch: str,
        dim: int,
        sampler,
        head_mats: Optional[List[Tensor]] = None,
        valid: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Shared deformable-attention core for both branches.

        base_per_level[l]: constant (N, dim) sampling coords in level-l
        cell units; offsets from f_q are added in the same units.
        """
        cfg = self.config
        N, M, L, K = cfg.n_queries, cfg.n_heads, cfg.levels, cfg.n_points
        C = cfg.channels
        if head_mats is None:
            head_mats = self._head_mats(branch)

        off = self._linear(f_q, f"{branch}/offset_w", f"{branch}/offset_b")
        off = ad.reshape(off, (N * M * L * K, dim))
        w = self._linear(f_q, f"{branch}/weight_w", f"{branch}/weight_b")
        attn = ad.softmax(ad.reshape(w, (N * M, L * K)), axis=1)
        attn = ad.reshape(attn, (N * M * L * K, 1))

        # every sampling position, in (level, head, query, point) order
        bases = np.concatenate(
            [np.tile(np.repeat(b, K, axis=0), (M, 1)) for b in base_per_level]
        )
        pos = ad.take_rows(off, self._perm) + bases
        group = M * N * K
        samples = [
            sampler(levels[l], ad.narrow(pos, 0, l * group, group), normalized=False)
            for l in range(L)
        ]
        weighted = ad.concat(samples, axis=0) * ad.take_rows(attn, self._perm)
        z = ad.reshape(weighted, (L, M, N, K, C)).sum(axis=(0, 3))  # (M, N, C)

        out = None
        for m in range(M):
            zm = ad.reshape(ad.narrow(z, 0, m, 1), (N, C))
            term = ad.matmul(zm, head_mats[m])
            out = term if out is None else out + term
        if valid is not None and not valid.all():
            out = out * valid.astype(np.float64)[:, None]
        return out

    def _radar_bases(self, ref_points: np.ndarray, shapes) -> List[np.ndarray]:
        unit = normalize_to_level(ref_points, self.config.grid)
        return [unit * (np.asarray(s, dtype=np.float64) - 1.0) for s in shapes]

    def _image_bases(self, ref_points: np.ndarray, cam: CameraModel, shapes):
        xyz = spherical_to_cartesian(ref_points)
        uv, valid = cam.project(xyz)
        H, W = cam.image_size
        unit = np.stack([uv[:, 1] / (H - 1.0), uv[:, 0] / (W - 1.0)], axis=-1)
        unit = np.where(valid[:, None], unit, 0.5)
        bases = [unit * (np.asarray(s, dtype=np.float64) - 1.0) for s in shapes]
        return bases, valid

    def msda_3d(self, q: QuerySet, levels: Sequence[Tensor]) -> Tensor:
        """Deformable attention into the radar pyramid; returns (N, C)."""
        shapes = [lvl.data.shape[1:] for lvl in levels]
        bases = self._radar_bases(q.ref_points, shapes)
        return self._msda(q.features, levels, bases, "msda3d", 3, ad.trilinear_sample)

    def msda_2d(self, q: QuerySet, levels: Sequence[Tensor], cam: CameraModel) -> Tensor:
        """Deformable attention into the image pyramid at camera projections."""
        shapes = [lvl.data.shape[1:] for lvl in levels]
        bases, valid = self._image_bases(q.ref_points, cam, shapes)
        return self._msda(
            q.features, levels, bases, "msda2d", 2, ad.bilinear_sample, valid=valid
        )

    def fuse(self, f_q: Tensor, f_r: Tensor, f_i: Tensor) -> Tensor:
        """Concat both modality reads, FFN, project to C, residual add."""
        cat = ad.concat([f_r, f_i], axis=1)
        h = ad.relu(self._linear(cat, "fuse/w1", "fuse/b1"))
        h = self._linear(h, "fuse/w2", "fuse/b2")
        out = self._linear(h, "fuse/w3", "fuse/b3")
        return f_q + out

    def _branch(self, f: Tensor, name: str) -> Tensor:
        h = ad.relu(self._linear(f, f"head/{name}/w1", f"head/{name}/b1"))
        return self._linear(h, f"head/{name}/w2", f"head/{name}/b2")

    def detect_head(self, q: QuerySet) -> IterationOutput:
        """Per-query class logits and box regression."""
        f = q.features
        logits = self._branch(f, "class")
        ref_cart = spherical_to_cartesian(q.ref_points)
        center = self._branch(f, "center") + ref_cart
        size = ad.exp(self._branch(f, "size"))
        raw = self._branch(f, "angle")
        norm = ad.sqrt((raw * raw).sum(axis=1, keepdims=True) + 1e-24)
        sincos = raw / norm
        return IterationOutput(
            logits=logits,
            center=center,
            size=size,
            sincos=sincos,
            ref_points=q.ref_points.copy(),
        )

    # -- full pipeline ------------------------------------------------------

    def forward(
        self,
        cube: Tensor,
        image: Tensor,
        cam: CameraModel,
        n_iter: Optional[int] = None,
    ) -> List[IterationOutput]:
        """Run encoders plus n_iter refinement iterations.

        Returns one IterationOutput per iteration (last is the final
        prediction). Reference points advance to each iteration's
        predicted centers, detached from the tape and clamped to the FoV.
        """
        n_iter = self.config.n_iter if n_iter is None else n_iter
        if n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        pyr3 = self.radar_encoder.forward(cube)
        pyr2 = self.image_encoder.forward(image)
        mats3 = self._head_mats("msda3d")
        mats2 = self._head_mats("msda2d")
        shapes3 = [lvl.data.shape[1:] for lvl in pyr3]
        shapes2 = [lvl.data.shape[1:] for lvl in pyr2]

        q = self.init_queries()
        outputs = []
        for _ in range(n_iter):
            q = self.self_attend(q)
            bases3 = self._radar_bases(q.ref_points, shapes3)
            f_r = self._msda(
                q.features, pyr3, bases3, "msda3d", 3, ad.trilinear_sample,
                head_mats=mats3,
            )
            bases2, valid = self._image_bases(q.ref_points, cam, shapes2)
            f_i = self._msda(
                q.features, pyr2, bases2, "msda2d", 2, ad.bilinear_sample,
                head_mats=mats2, valid=valid,
            )
            feat = self.fuse(q.features, f_r, f_i)
            q = QuerySet(features=feat, ref_points=q.ref_points)
            det = self.detect_head(q)
            outputs.append(det)
            next_ref = self.config.grid.clamp(cartesian_to_spherical(det.center.data))
            q = QuerySet(features=q.features, ref_points=next_ref)
        return outputs

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.store, config=self.config.to_json_dict(), extra=extra)

    @classmethod
    def load(cls, path) -> "FusionModel":
        arrays, manifest = load_checkpoint(path)
        model = cls(ModelConfig.from_json_dict(manifest["config"]))
        model.store.load_arrays(arrays)
        return model


def boxes_from_output(
    out: IterationOutput, n_classes: int, min_score: float = 0.0
) -> List[Box3D]:
    """Convert head outputs to scored boxes (background excluded)."""
    z = out.logits.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    fg = probs[:, :n_classes]
    boxes = []
    for i in range(z.shape[0]):
        cid = int(np.argmax(fg[i]))
        score = float(fg[i, cid])
        if score < min_score:
            continue
        boxes.append(
            Box3D(
                center=out.center.data[i],
                size=np.maximum(out.size.data[i], 1e-6),
                yaw=float(
                    math.atan2(out.sincos.data[i, 0], out.sincos.data[i, 1])
                ),
                class_id=cid,
                score=score,
            )
        )
    return boxes
