"""Toy training loop: AdamW over per-frame gradient steps.

Frames are preloaded into memory (compressed cube + image + boxes), then
visited one per optimizer step in a seed-shuffled order each epoch. The
loop emits a per-epoch loss CSV and a checkpoint zip.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .dataset import load_frame, split_frame_dirs
from .fusion import FusionModel, ModelConfig
from .geometry import Box3D, CameraModel
from .losses import total_loss
from .preprocess import compress_doppler
from .simulate import SpectrumTesseract, doppler_axis


def toy_model_config(grid, n_classes: int = 2, seed: int = 0) -> ModelConfig:
    """Small-but-trainable defaults for desk-scale experiments."""
    from .encoders import PyramidConfig

    return ModelConfig(
        n_queries=16,
        n_heads=2,
        n_points=2,
        channels=16,
        n_iter=4,
        n_classes=n_classes,
        init_seed=seed,
        grid=grid,
        radar_encoder=PyramidConfig(levels=2, base_channels=8, out_channels=16),
        image_encoder=PyramidConfig(levels=2, base_channels=8, out_channels=16),
    )


class AdamW:
    """Adam with decoupled weight decay; constant learning rate."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        # fold the bias corrections into two scalars:
        # update = lr * (m / bc1) / (sqrt(v / bc2) + eps)
        num_scale = self.lr / bc1
        den_scale = 1.0 / math.sqrt(bc2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            den = np.sqrt(v)
            den *= den_scale
            den += self.eps
            update = m / den
            update *= num_scale
            if self.weight_decay:
                update += (self.lr * self.weight_decay) * p.data
            p.data -= update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainSample:
    cube: Tensor
    image: Tensor
    cam: CameraModel
    boxes: List[Box3D]
    frame_id: str


def load_training_samples(
    model: FusionModel, data_root, split: str = "train"
) -> List[TrainSample]:
    """Read a split, compress Doppler, and pre-scale model inputs."""
    samples = []
    for frame_dir in split_frame_dirs(data_root, split):
        frame = load_frame(frame_dir)
        spec = SpectrumTesseract(
            power=frame.spectrum,
            doppler_mps=doppler_axis(frame.doppler_bins, frame.doppler_span),
            range_m=frame.grid.range_axis(),
            elevation_rad=frame.grid.elevation_axis(),
            azimuth_rad=frame.grid.azimuth_axis(),
        )
        cube = compress_doppler(spec)
        samples.append(
            TrainSample(
                cube=model.prepare_cube(cube.values),
                image=model.prepare_image(frame.image),
                cam=frame.camera,
                boxes=frame.boxes,
                frame_id=frame.frame_id,
            )
        )
    return samples


@dataclass
class TrainResult:
    model: FusionModel
    epoch_losses: List[float]
    seconds: float


def train(
    model: FusionModel,
    samples: Sequence[TrainSample],
    epochs: int,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    seed: int = 0,
    n_iter: Optional[int] = None,
    log_fn=None,
) -> TrainResult:
    """Run per-frame AdamW steps for the given number of epochs."""
    if not samples:
        raise ValueError("no training samples")
    opt = AdamW(model.store.tensors(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    cfg = model.config
    losses = []
    t0 = time.monotonic()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        acc = 0.0
        for i in order:
            s = samples[i]
            opt.zero_grad()
            with Tape():
                outputs = model.forward(s.cube, s.image, s.cam, n_iter=n_iter)
                loss = total_loss(outputs, s.boxes, cfg.n_classes, aux_loss=cfg.aux_loss)
                loss.backward()
            opt.step()
            acc += loss.item()
        losses.append(acc / len(samples))
        if log_fn:
            log_fn(epoch, losses[-1])
    return TrainResult(model=model, epoch_losses=losses, seconds=time.monotonic() - t0)


def write_loss_csv(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.8f}"])


def train_toy(
    data_root,
    out_dir,
    config: ModelConfig,
    epochs: int = 150,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    seed: int = 0,
    n_iter: Optional[int] = None,
    split: str = "train",
    log_fn=None,
) -> TrainResult:
    """End-to-end convenience: build, train, and persist model + loss curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = FusionModel(config)
    samples = load_training_samples(model, data_root, split)
    result = train(
        model,
        samples,
        epochs=epochs,
        lr=lr,
        weight_decay=weight_decay,
        seed=seed,
        n_iter=n_iter,
        log_fn=log_fn,
    )
    write_loss_csv(out / "loss.csv", result.epoch_losses)
    model.save(
        out / "model.ckpt",
        extra={"epochs": epochs, "lr": lr, "seed": seed, "split": split},
    )
    return result
