"""Small residual pyramid encoders with a top-down feature neck.

Both branches share one topology, parameterized by dimensionality:

  stem conv -> [stage: strided conv downsample + residual block] x (L-1)

followed by a neck that projects every stage to a common channel width
with 1x1 convs and adds nearest-upsampled coarser levels top-down. The
image branch additionally mixes in a skip lateral computed from the
average-pooled raw input at each level's resolution.

No normalization layers; biases kept. Level l has exactly
input_extent / 2^l cells per spatial axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


class ConfigError(ValueError):
    """Encoder configuration incompatible with the input extents."""


@dataclass
class PyramidConfig:
    levels: int = 3
    base_channels: int = 16
    out_channels: int = 32
    stage_strides: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("pyramid needs at least 2 levels")
        if not self.stage_strides:
            self.stage_strides = (1,) + (2,) * (self.levels - 1)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if len(self.stage_strides) != self.levels:
            raise ConfigError(
                f"{len(self.stage_strides)} strides for {self.levels} levels"
            )
        if self.stage_strides[0] != 1:
            raise ConfigError("first stage must keep full resolution")
        if any(s < 2 for s in self.stage_strides[1:]):
            raise ConfigError("downsample stages need stride >= 2")

    def cumulative_strides(self) -> List[int]:
        out, c = [], 1
        for s in self.stage_strides:
            c *= s
            out.append(c)
        return out

    def stage_channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def to_json_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "out_channels": self.out_channels,
            "stage_strides": list(self.stage_strides),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PyramidConfig":
        d = dict(d)
        if "stage_strides" in d:
            d["stage_strides"] = tuple(d["stage_strides"])
        return cls(**d)


def check_extents(extents: Tuple[int, ...], cfg: PyramidConfig) -> None:
    """Reject inputs whose extents the pyramid cannot divide evenly."""
    total = cfg.cumulative_strides()[-1]
    for n in extents:
        if n % total != 0:
            raise ConfigError(
                f"extent {n} not divisible by cumulative stride {total}"
            )


def _avg_pool(x: Tensor, factor: int, nd: int) -> Tensor:
    """Block-mean pooling by `factor` along every spatial axis."""
    if factor == 1:
        return x
    shape = x.data.shape
    C = shape[0]
    new = [C]
    axes = []
    for i, n in enumerate(shape[1:]):
        new.extend([n // factor, factor])
        axes.append(2 + 2 * i)
    return ad.mean_(ad.reshape(x, tuple(new)), axis=tuple(axes))


class PyramidEncoder:
    """Parameter owner + forward pass for one modality branch."""

    def __init__(
        self,
        store: ParamStore,
        cfg: PyramidConfig,
        in_channels: int,
        nd: int,
        prefix: str,
        rng: np.random.Generator,
        input_skip: bool = False,
    ):
        if nd not in (2, 3):
            raise ConfigError("encoder supports 2D or 3D inputs only")
        self.cfg = cfg
        self.nd = nd
        self.prefix = prefix
        self.input_skip = input_skip
        self.store = store
        self._conv = ad.conv2d if nd == 2 else ad.conv3d
        self._upsample = ad.upsample_nearest2d if nd == 2 else ad.upsample_nearest3d

        k = 3
        taps = k**nd

        def conv_params(name, c_in, c_out):
            store.uniform(f"{prefix}/{name}/w", (c_out, c_in) + (k,) * nd, c_in * taps, rng)
            store.uniform(f"{prefix}/{name}/b", (c_out,), c_in * taps, rng)

        def conv1_params(name, c_in, c_out):
            store.uniform(f"{prefix}/{name}/w", (c_out, c_in) + (1,) * nd, c_in, rng)
            store.uniform(f"{prefix}/{name}/b", (c_out,), c_in, rng)

        conv_params("stem", in_channels, cfg.stage_channels(0))
        for l in range(cfg.levels):
            c = cfg.stage_channels(l)
            if l > 0:
                conv_params(f"down{l}", cfg.stage_channels(l - 1), c)
            conv_params(f"block{l}/conv1", c, c)
            conv_params(f"block{l}/conv2", c, c)
            conv1_params(f"lateral{l}", c, cfg.out_channels)
            if input_skip:
                conv1_params(f"skip{l}", in_channels, cfg.out_channels)

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    def _apply_conv(self, x: Tensor, name: str, stride: int = 1, pad: int = 1) -> Tensor:
        return self._conv(x, self._p(f"{name}/w"), self._p(f"{name}/b"), stride=stride, pad=pad)

    def _res_block(self, x: Tensor, name: str) -> Tensor:
        h = self._apply_conv(ad.relu(self._apply_conv(x, f"{name}/conv1")), f"{name}/conv2")
        return ad.relu(x + h)

    def forward(self, x: Tensor) -> List[Tensor]:
        """Input (C_in, *spatial) -> fine-to-coarse list of L feature levels."""
        check_extents(x.data.shape[1:], self.cfg)
        cfg = self.cfg

        trunk = []
        h = ad.relu(self._apply_conv(x, "stem"))
        for l in range(cfg.levels):
            if l > 0:
                h = ad.relu(self._apply_conv(h, f"down{l}", stride=cfg.stage_strides[l]))
            h = self._res_block(h, f"block{l}")
            trunk.append(h)

        laterals = [
            self._apply_conv(trunk[l], f"lateral{l}", pad=0) for l in range(cfg.levels)
        ]
        if self.input_skip:
            cum = self.cfg.cumulative_strides()
            for l in range(cfg.levels):
                pooled = _avg_pool(x, cum[l], self.nd)
                laterals[l] = laterals[l] + self._apply_conv(pooled, f"skip{l}", pad=0)

        levels = [None] * cfg.levels
        levels[-1] = laterals[-1]
        for l in range(cfg.levels - 2, -1, -1):
            levels[l] = laterals[l] + self._upsample(
                levels[l + 1], cfg.stage_strides[l + 1]
            )
        return levels


def build_radar_encoder(
    store: ParamStore, cfg: PyramidConfig, rng, in_channels: int = 3,
    prefix: str = "radar_enc",
) -> PyramidEncoder:
    return PyramidEncoder(store, cfg, in_channels, nd=3, prefix=prefix, rng=rng)


def build_image_encoder(
    store: ParamStore, cfg: PyramidConfig, rng, in_channels: int = 3,
    prefix: str = "image_enc",
) -> PyramidEncoder:
    return PyramidEncoder(
        store, cfg, in_channels, nd=2, prefix=prefix, rng=rng, input_skip=True
    )


def encode_radar(cube: Tensor, encoder: PyramidEncoder) -> List[Tensor]:
    """RadarCube3 laid out channels-first (3, R, E, A) -> FeaturePyramid3D."""
    return encoder.forward(cube)


def encode_image(img: Tensor, encoder: PyramidEncoder) -> List[Tensor]:
    """(3, H, W) image -> FeaturePyramid2D."""
    return encoder.forward(img)
