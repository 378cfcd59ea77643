"""KITTI-style detection evaluation.

AP uses greedy score-ordered matching (each ground truth consumable
once, hit iff IoU clears the threshold) and 40-point interpolation of
the precision-recall curve. The error block reports mean absolute
center/size errors per axis, symmetry-wrapped rotation error, BEV/3D
translation distances, a scale error from size-aligned IoU, and the
rotation error again in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D, iou_3d, iou_bev

IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.7)
N_RECALL_POINTS = 40

FramePair = Tuple[Sequence[Box3D], Sequence[Box3D]]  # (preds, gts)


def _match_frame(
    preds: Sequence[Box3D],
    gts: Sequence[Box3D],
    iou_fn: Callable[[Box3D, Box3D], float],
    threshold: float,
) -> List[Tuple[float, bool, Optional[int]]]:
    """Greedy matching by descending score.

    Returns one (score, is_tp, gt_index) record per prediction; each gt
    is consumed by at most one prediction.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    records = []
    for i in order:
        best_iou, best_j = 0.0, None
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou_fn(preds[i], gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j is not None and best_iou >= threshold:
            taken[best_j] = True
            records.append((preds[i].score, True, best_j))
        else:
            records.append((preds[i].score, False, None))
    return records


def pr_curve(
    frames: Sequence[FramePair],
    iou_fn: Callable[[Box3D, Box3D], float],
    threshold: float,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Pooled (recall, precision) arrays over all frames, plus gt count."""
    records = []
    n_gts = 0
    for preds, gts in frames:
        n_gts += len(gts)
        records.extend(
            (score, tp) for score, tp, _ in _match_frame(preds, gts, iou_fn, threshold)
        )
    records.sort(key=lambda r: -r[0])
    if not records or n_gts == 0:
        return np.zeros(0), np.zeros(0), n_gts
    tp = np.cumsum([1.0 if r[1] else 0.0 for r in records])
    fp = np.cumsum([0.0 if r[1] else 1.0 for r in records])
    recall = tp / n_gts
    precision = tp / (tp + fp)
    return recall, precision, n_gts


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Average of interpolated precision at recalls 1/40 .. 40/40."""
    if len(recall) == 0:
        return 0.0
    total = 0.0
    for i in range(1, N_RECALL_POINTS + 1):
        r = i / N_RECALL_POINTS
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / N_RECALL_POINTS


def average_precision(
    frames: Sequence[FramePair],
    iou_fn: Callable[[Box3D, Box3D], float],
    threshold: float,
) -> float:
    """AP over pooled frames; defined as 1 when neither gts nor preds exist."""
    recall, precision, n_gts = pr_curve(frames, iou_fn, threshold)
    if n_gts == 0:
        any_preds = any(len(preds) for preds, _ in frames)
        return 0.0 if any_preds else 1.0
    return interpolated_ap(recall, precision)


# ---------------------------------------------------------------------------
# error metrics


def rotation_error(yaw_a: float, yaw_b: float) -> float:
    """Smallest yaw difference treating boxes as pi-symmetric, in [0, pi/2]."""
    d = abs(yaw_a - yaw_b) % math.pi
    return min(d, math.pi - d)


def scale_error(a: Box3D, b: Box3D) -> float:
    """1 - 3D IoU after aligning centers and yaw (size disagreement only)."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    union = a.volume() + b.volume() - inter
    return 1.0 - inter / union if union > 0 else 1.0


ERROR_FIELDS = (
    "center_x",
    "center_y",
    "center_z",
    "size_l",
    "size_w",
    "size_h",
    "rotation_rad",
    "translation_bev",
    "translation_3d",
    "scale",
    "orientation_deg",
)


def error_metrics(pairs: Sequence[Tuple[Box3D, Box3D]]) -> Dict[str, float]:
    """Mean errors over matched (prediction, ground truth) pairs."""
    if not pairs:
        return {k: 0.0 for k in ERROR_FIELDS} | {"n_pairs": 0}
    acc = {k: 0.0 for k in ERROR_FIELDS}
    for pred, gt in pairs:
        dc = np.abs(pred.center - gt.center)
        ds = np.abs(pred.size - gt.size)
        acc["center_x"] += dc[0]
        acc["center_y"] += dc[1]
        acc["center_z"] += dc[2]
        acc["size_l"] += ds[0]
        acc["size_w"] += ds[1]
        acc["size_h"] += ds[2]
        rot = rotation_error(pred.yaw, gt.yaw)
        acc["rotation_rad"] += rot
        acc["orientation_deg"] += math.degrees(rot)
        delta = pred.center - gt.center
        acc["translation_bev"] += float(np.hypot(delta[0], delta[1]))
        acc["translation_3d"] += float(np.linalg.norm(delta))
        acc["scale"] += scale_error(pred, gt)
    n = len(pairs)
    out = {k: v / n for k, v in acc.items()}
    out["n_pairs"] = n
    return out


def matched_pairs(
    frames: Sequence[FramePair],
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
    threshold: float = 0.3,
) -> List[Tuple[Box3D, Box3D]]:
    """Collect (pred, gt) pairs from greedy matching at a fixed threshold."""
    pairs = []
    for preds, gts in frames:
        order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
        taken = [False] * len(gts)
        for i in order:
            best_iou, best_j = 0.0, None
            for j, gt in enumerate(gts):
                if taken[j]:
                    continue
                v = iou_fn(preds[i], gt)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j is not None and best_iou >= threshold:
                taken[best_j] = True
                pairs.append((preds[i], gts[best_j]))
    return pairs


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    ap: Dict[str, Dict[str, Dict[str, float]]]  # space -> iou -> class -> AP
    mean_ap: Dict[str, Dict[str, float]]  # space -> iou -> mAP
    errors: Dict[str, float]
    classes: List[int]
    n_frames: int
    curves: Dict[str, Dict[str, Dict[str, List[float]]]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "ap": self.ap,
            "mean_ap": self.mean_ap,
            "errors": self.errors,
            "classes": self.classes,
            "n_frames": self.n_frames,
            "curves": self.curves,
        }

    def csv_rows(self) -> List[List[str]]:
        rows = [["kind", "space", "iou", "class", "value"]]
        for space in sorted(self.ap):
            for thr in sorted(self.ap[space]):
                for cls in sorted(self.ap[space][thr]):
                    rows.append(
                        ["ap", space, thr, cls, f"{self.ap[space][thr][cls]:.6f}"]
                    )
                rows.append(
                    ["map", space, thr, "-", f"{self.mean_ap[space][thr]:.6f}"]
                )
        for k in ERROR_FIELDS:
            rows.append(["error", "-", "-", k, f"{self.errors[k]:.6f}"])
        return rows


def _fmt_thr(t: float) -> str:
    return f"{t:g}"


def evaluate_boxes(
    frames: Sequence[FramePair],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    match_threshold: float = 0.3,
    with_curves: bool = False,
) -> EvalReport:
    """Score predictions against ground truth over both IoU spaces.

    AP is computed per class for every (space, threshold); mAP averages
    over the classes that appear in the ground truth. Error metrics use
    class-blind greedy matching at `match_threshold` 3D IoU.
    """
    classes = sorted({gt.class_id for _, gts in frames for gt in gts})
    spaces = {"bev": iou_bev, "3d": iou_3d}
    ap: Dict[str, Dict[str, Dict[str, float]]] = {}
    mean_ap: Dict[str, Dict[str, float]] = {}
    curves: Dict[str, Dict[str, Dict[str, List[float]]]] = {}
    for space, fn in spaces.items():
        ap[space] = {}
        mean_ap[space] = {}
        curves[space] = {}
        for thr in thresholds:
            key = _fmt_thr(thr)
            ap[space][key] = {}
            curves[space][key] = {}
            vals = []
            for cls in classes:
                cls_frames = [
                    (
                        [p for p in preds if p.class_id == cls],
                        [g for g in gts if g.class_id == cls],
                    )
                    for preds, gts in frames
                ]
                value = average_precision(cls_frames, fn, thr)
                ap[space][key][str(cls)] = value
                vals.append(value)
                if with_curves:
                    recall, precision, _ = pr_curve(cls_frames, fn, thr)
                    curves[space][key][str(cls)] = [
                        float(precision[recall >= (i / N_RECALL_POINTS) - 1e-12].max())
                        if (recall >= (i / N_RECALL_POINTS) - 1e-12).any()
                        else 0.0
                        for i in range(1, N_RECALL_POINTS + 1)
                    ]
            if vals:
                mean_ap[space][key] = float(np.mean(vals))
            else:
                any_preds = any(len(preds) for preds, _ in frames)
                mean_ap[space][key] = 0.0 if any_preds else 1.0

    errors = error_metrics(matched_pairs(frames, iou_3d, match_threshold))
    return EvalReport(
        ap=ap,
        mean_ap=mean_ap,
        errors=errors,
        classes=classes,
        n_frames=len(frames),
        curves=curves if with_curves else {},
    )
