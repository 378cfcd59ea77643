"""Command-line interface: synth | preprocess | train-toy | infer | eval | plot.

Every subcommand is deterministic under a fixed seed (flag, else the
RXF_SEED environment variable, else 0), including with --jobs > 1:
per-frame work depends only on (seed, frame id, config), and aggregate
files are assembled in sorted frame order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetConfig,
    load_frame,
    make_dataset,
    read_split,
    split_frame_dirs,
)
from .evaluate import evaluate_boxes
from .fusion import FusionModel, ModelConfig, boxes_from_output
from .geometry import Box3D, SphericalGrid
from .preprocess import (
    ca_cfar,
    compress_doppler,
    range_filter,
    sparse_from_mask,
    to_dense,
    write_rxs,
)
from .containers import write_rxt
from .simulate import SpectrumTesseract, doppler_axis
from .train import toy_model_config, train_toy


def _seed_of(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("RXF_SEED", "0"))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg_dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
    overrides = {
        "out_dir": args.out,
        "seed": _seed_of(args),
        "n_train": args.train,
        "n_val": args.val,
        "n_test": args.test,
        "max_objects": args.max_objects,
        "n_classes": args.classes,
        "noise_floor": args.noise_floor,
    }
    for k, v in overrides.items():
        if v is not None:
            cfg_dict[k] = v
    cfg = DatasetConfig.from_json_dict(cfg_dict)
    root = make_dataset(cfg, jobs=args.jobs)
    print(f"wrote {cfg.n_frames} frames under {root}")
    return 0


# ---------------------------------------------------------------------------
# preprocess


def _preprocess_frame(task) -> dict:
    frame_dir, out_root, mode, alpha, guard, train_cells, scale = task
    frame_dir = Path(frame_dir)
    frame = load_frame(frame_dir, with_image=False)
    spec = SpectrumTesseract(
        power=frame.spectrum,
        doppler_mps=doppler_axis(frame.doppler_bins, frame.doppler_span),
        range_m=frame.grid.range_axis(),
        elevation_rad=frame.grid.elevation_axis(),
        azimuth_rad=frame.grid.azimuth_axis(),
    )
    cube = compress_doppler(spec)
    d_bins = spec.power.shape[0]
    out_dir = Path(out_root) / "frames" / frame.frame_id
    out_dir.mkdir(parents=True, exist_ok=True)

    info = {
        "frame_id": frame.frame_id,
        "dense_ratio": d_bins / 3.0,
        "mode": mode,
    }
    if mode == "none":
        write_rxt(out_dir / "cube.rxt", cube.values)
        info["retention"] = 1.0
    else:
        if mode == "range":
            sparse = range_filter(cube, alpha=alpha)
        elif mode == "cfar":
            sparse = ca_cfar(cube, guard=guard, train=train_cells, scale=scale)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        write_rxs(out_dir / "spectrum.rxs", sparse)
        write_rxt(out_dir / "cube.rxt", to_dense(sparse))
        info["retention"] = sparse.retention
        info["points"] = len(sparse)
    return info


def cmd_preprocess(args) -> int:
    frame_dirs = sorted((Path(args.data) / "frames").iterdir())
    tasks = [
        (str(d), args.out, args.mode, args.alpha, args.guard, args.train_cells, args.scale)
        for d in frame_dirs
    ]
    failures = []
    results = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for task, res in zip(tasks, pool.map(_preprocess_frame, tasks, chunksize=4)):
                results.append(res)
    else:
        for task in tasks:
            try:
                results.append(_preprocess_frame(task))
            except Exception as e:  # noqa: BLE001 - enumerate per-frame failures
                failures.append((Path(task[0]).name, str(e)))

    if failures:
        for fid, msg in failures:
            print(f"preprocess failed for frame {fid}: {msg}", file=sys.stderr)
        return 1

    results.sort(key=lambda r: r["frame_id"])
    dense_ratio = results[0]["dense_ratio"] if results else 0.0
    mean_ret = float(np.mean([r["retention"] for r in results])) if results else 0.0
    report = {
        "mode": args.mode,
        "alpha": args.alpha,
        "dense_compression_ratio": dense_ratio,
        "mean_sparse_retention": mean_ret,
        "frames": results,
    }
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    _dump_json(out_root / "preprocess_report.json", report)
    print(f"dense compression ratio (elements in / out): {dense_ratio:.4f}")
    if args.mode != "none":
        print(f"mean sparse retention fraction: {mean_ret:.6f}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    data_root = Path(args.data)
    meta = json.loads((data_root / "meta.json").read_text())
    grid = SphericalGrid.from_json_dict(meta["grid"])
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
        cfg_dict.setdefault("grid", grid.to_json_dict())
        config = ModelConfig.from_json_dict(cfg_dict)
    else:
        config = toy_model_config(grid)
    config.init_seed = _seed_of(args)
    if args.n_iter is not None:
        config.n_iter = args.n_iter

    def log_fn(epoch, loss):
        if epoch % max(1, args.log_every) == 0 or epoch == args.epochs - 1:
            print(f"epoch {epoch:4d}  loss {loss:.6f}")

    result = train_toy(
        data_root,
        args.out,
        config,
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=_seed_of(args),
        split=args.split,
        log_fn=log_fn if args.verbose else None,
    )
    print(
        f"trained {args.epochs} epochs in {result.seconds:.1f}s; "
        f"final loss {result.epoch_losses[-1]:.6f}; outputs in {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# infer

_WORKER_MODEL = None


def _infer_init(checkpoint: str) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = FusionModel.load(checkpoint)


def _infer_frame(task) -> str:
    frame_dir, out_dir, min_score, n_iter = task
    model = _WORKER_MODEL
    frame = load_frame(frame_dir)
    spec = SpectrumTesseract(
        power=frame.spectrum,
        doppler_mps=doppler_axis(frame.doppler_bins, frame.doppler_span),
        range_m=frame.grid.range_axis(),
        elevation_rad=frame.grid.elevation_axis(),
        azimuth_rad=frame.grid.azimuth_axis(),
    )
    cube = compress_doppler(spec)
    outputs = model.forward(
        model.prepare_cube(cube.values),
        model.prepare_image(frame.image),
        frame.camera,
        n_iter=n_iter,
    )
    boxes = boxes_from_output(outputs[-1], model.config.n_classes, min_score=min_score)
    payload = {
        "frame_id": frame.frame_id,
        "detections": [b.to_json_dict() for b in boxes],
    }
    out_path = Path(out_dir) / f"{frame.frame_id}.json"
    _dump_json(out_path, payload)
    return frame.frame_id


def cmd_infer(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_dirs = [str(d) for d in split_frame_dirs(args.data, args.split)]
    tasks = [(d, str(out_dir), args.min_score, args.n_iter) for d in frame_dirs]
    failures = []
    if args.jobs > 1:
        with ProcessPoolExecutor(
            max_workers=args.jobs, initializer=_infer_init, initargs=(args.checkpoint,)
        ) as pool:
            list(pool.map(_infer_frame, tasks, chunksize=4))
    else:
        _infer_init(args.checkpoint)
        for task in tasks:
            try:
                _infer_frame(task)
            except Exception as e:  # noqa: BLE001
                failures.append((Path(task[0]).name, str(e)))
    if failures:
        for fid, msg in failures:
            print(f"inference failed for frame {fid}: {msg}", file=sys.stderr)
        return 1
    print(f"wrote detections for {len(tasks)} frames to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_pred_boxes(path: Path):
    payload = json.loads(path.read_text())
    return [Box3D.from_json_dict(d) for d in payload["detections"]]


def cmd_eval(args) -> int:
    gt_root = Path(args.gt)
    ids = read_split(gt_root)[args.split]
    frames = []
    failures = []
    for fid in sorted(ids):
        pred_path = Path(args.pred) / f"{fid}.json"
        try:
            preds = _load_pred_boxes(pred_path)
            frame = load_frame(
                gt_root / "frames" / fid, with_spectrum=False, with_image=False
            )
            frames.append((preds, frame.boxes))
        except Exception as e:  # noqa: BLE001
            failures.append((fid, str(e)))
    if failures:
        for fid, msg in failures:
            print(f"eval failed for frame {fid}: {msg}", file=sys.stderr)
        return 1

    report = evaluate_boxes(frames, match_threshold=args.match_iou, with_curves=True)
    _dump_json(Path(args.report), report.to_json_dict())
    if args.csv:
        csv_path = Path(args.report).with_suffix(".csv")
        lines = [",".join(row) for row in report.csv_rows()]
        csv_path.write_text("\n".join(lines) + "\n")
    for space in sorted(report.mean_ap):
        parts = [f"IoU {thr}: {v:.4f}" for thr, v in sorted(report.mean_ap[space].items())]
        print(f"mAP [{space}]  " + "  ".join(parts))
    print(f"report written to {args.report}")
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    from . import plots

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "spectrum":
        frame = load_frame(Path(args.data) / "frames" / args.frame, with_image=False)
        spec = SpectrumTesseract(
            power=frame.spectrum,
            doppler_mps=doppler_axis(frame.doppler_bins, frame.doppler_span),
            range_m=frame.grid.range_axis(),
            elevation_rad=frame.grid.elevation_axis(),
            azimuth_rad=frame.grid.azimuth_axis(),
        )
        plots.spectrum_views(compress_doppler(spec), out, title=f"frame {args.frame}")
    elif args.kind == "loss":
        plots.loss_curve(args.loss_csv, out)
    elif args.kind == "pr":
        report = json.loads(Path(args.report).read_text())
        plots.pr_curves(report, out, space=args.space)
    else:
        raise ValueError(f"unknown plot kind {args.kind!r}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rxfusion",
        description="Radar-camera 3D detection on synthetic 4D spectra",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="seed (default: RXF_SEED or 0)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="dataset config JSON; flags override")
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--max-objects", type=int, default=None)
    p.add_argument("--noise-floor", type=float, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="compress and filter spectra")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--mode", choices=("none", "range", "cfar"), default="none")
    p.add_argument("--guard", type=int, default=2)
    p.add_argument("--train-cells", type=int, default=8)
    p.add_argument("--scale", type=float, default=3.0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train-toy", help="train the fusion model on a toy dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--n-iter", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run the model over a split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--min-score", type=float, default=0.0)
    p.add_argument("--n-iter", type=int, default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--match-iou", type=float, default=0.3)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="emit static plots")
    common(p)
    p.add_argument("--kind", choices=("spectrum", "loss", "pr"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--frame")
    p.add_argument("--loss-csv")
    p.add_argument("--report")
    p.add_argument("--space", default="3d")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
