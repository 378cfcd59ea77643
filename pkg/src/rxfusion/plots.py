"""Static plot emission (PNG files, no interactive display)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import N_RECALL_POINTS
from .preprocess import RadarCube3


def spectrum_views(cube: RadarCube3, out_path, title: str = "") -> None:
    """Range-azimuth and elevation-azimuth max-projections of mean power."""
    m = cube.mean_power()
    ra = m.max(axis=1)  # (R, A)
    ea = m.max(axis=0)  # (E, A)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    az_deg = np.degrees(cube.azimuth_rad)
    im0 = axes[0].imshow(
        np.log1p(ra / max(ra.max(), 1e-12) * 1e3),
        origin="lower",
        aspect="auto",
        extent=[az_deg[0], az_deg[-1], cube.range_m[0], cube.range_m[-1]],
        cmap="viridis",
    )
    axes[0].set_xlabel("azimuth (deg)")
    axes[0].set_ylabel("range (m)")
    axes[0].set_title("range-azimuth")
    fig.colorbar(im0, ax=axes[0], shrink=0.8)
    el_deg = np.degrees(cube.elevation_rad)
    im1 = axes[1].imshow(
        np.log1p(ea / max(ea.max(), 1e-12) * 1e3),
        origin="lower",
        aspect="auto",
        extent=[az_deg[0], az_deg[-1], el_deg[0], el_deg[-1]],
        cmap="viridis",
    )
    axes[1].set_xlabel("azimuth (deg)")
    axes[1].set_ylabel("elevation (deg)")
    axes[1].set_title("elevation-azimuth")
    fig.colorbar(im1, ax=axes[1], shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def loss_curve(csv_path, out_path) -> None:
    epochs, losses = [], []
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            epochs.append(int(row["epoch"]))
            losses.append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def pr_curves(report: dict, out_path, space: str = "3d") -> None:
    """Interpolated PR curves per (threshold, class) from a report dict."""
    curves = report.get("curves", {}).get(space, {})
    fig, ax = plt.subplots(figsize=(6, 4))
    recalls = np.arange(1, N_RECALL_POINTS + 1) / N_RECALL_POINTS
    for thr in sorted(curves):
        for cls in sorted(curves[thr]):
            ax.plot(recalls, curves[thr][cls], label=f"IoU {thr}, class {cls}")
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"precision-recall ({space})")
    if curves:
        ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
