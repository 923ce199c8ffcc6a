"""Command-line entry points.

Subcommands: synth, train, eval, infer, report, overlay. All commands are
non-interactive, write only under their --out path, and exit with 2 on
configuration errors, 3 on IO/data errors, 4 on numeric failure.

The KFSEG_NUM_WORKERS environment variable caps loader/generator
parallelism (default 1; everything stays deterministic either way).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, harness, synth
from .errors import (
    CorruptArchive,
    CountMismatch,
    DecodeError,
    InvalidConfig,
    IoError,
    KfsegError,
    MalformedManifest,
    MissingManifest,
    NonFiniteLoss,
    TooFewVideos,
    UnknownVideo,
    VersionMismatch,
)
from .model import ModelConfig, load_checkpoint, make_model_config

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (InvalidConfig, MalformedManifest, TooFewVideos, VersionMismatch)
_IO_ERRORS = (
    IoError,
    MissingManifest,
    CountMismatch,
    UnknownVideo,
    DecodeError,
    CorruptArchive,
    FileNotFoundError,
    OSError,
)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("KFSEG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _parse_range(text: str) -> tuple[int, int] | None:
    if text is None:
        return None
    if ":" in text:
        lo, hi = text.split(":", 1)
        return int(lo), int(hi)
    v = int(text)
    return v, v


def cmd_synth(args) -> int:
    if args.config:
        cfg = synth.SynthConfig.from_json(args.config)
    else:
        cfg = synth.SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.size is not None:
        cfg.image_size = args.size
    frames_range = _parse_range(args.frames)
    if frames_range is not None and frames_range[0] == frames_range[1]:
        cfg.n_frames = frames_range[0]
        frames_range = None
    manifest = synth.generate_dataset(cfg, args.videos, args.out, frames_range=frames_range)
    print(f"wrote {len(manifest.entries)} videos, {manifest.total_frames()} frames to {args.out}")
    return 0


def _model_config_from_doc(doc: dict, default_seed: int) -> ModelConfig:
    if "encoder" in doc and isinstance(doc["encoder"], dict):
        # fully explicit document
        return ModelConfig.from_dict({**doc, "seed": doc.get("seed", default_seed)})
    return make_model_config(
        encoder=doc.get("encoder", "vanilla"),
        block=doc.get("block", "none"),
        base_channels=doc.get("base_channels", 64),
        image_size=doc.get("image_size", 256),
        stack_depth=doc.get("stack_depth", 5),
        seed=doc.get("seed", default_seed),
    )


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read experiment config {args.config}: {exc}") from exc
    train_cfg = harness.TrainConfig.from_dict(doc.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    grid = [_model_config_from_doc(item, train_cfg.seed) for item in doc.get("grid", [])]
    if not grid:
        raise InvalidConfig("experiment config has an empty grid")
    manifest = data.load_manifest(args.data)
    folds = [args.fold] if args.fold is not None else None
    harness.run_experiment(grid, train_cfg, manifest, args.out, k=args.k, folds=folds)
    print(f"runs written under {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _, metadata = load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.data)
    if args.fold is not None:
        split_seed = args.split_seed if args.split_seed is not None else metadata.get("seed", 0)
        folds = harness.cross_val_split(manifest, k=args.k, seed=split_seed)
        fold = folds[args.fold]
    else:
        test_videos = metadata.get("test_videos")
        if not test_videos:
            raise InvalidConfig("checkpoint metadata has no test videos; pass --fold")
        counts = {e.video_id: e.frames for e in manifest.entries}
        fold = harness.FoldSpec(
            fold_id=int(metadata.get("fold", 0)),
            train_videos=[v for v in counts if v not in test_videos],
            test_videos=list(test_videos),
            train_frames=sum(c for v, c in counts.items() if v not in test_videos),
            test_frames=sum(counts[v] for v in test_videos),
        )
    report, records = harness.evaluate_fold(model, fold, manifest)
    out = Path(args.out) if args.out else Path("metrics.json")
    harness.write_metrics_json(report, records, out)
    print(f"fold {fold.fold_id}: dsc {report.stats['dsc'][0]:.3f} over {report.frame_count} frames -> {out}")
    return 0


def cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    model.eval()
    seq = data.load_video_dir(args.video, canonical_size=(model.config.encoder.image_size,) * 2)
    frames = seq.frame_array()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import torch

    from .decoder import binarize

    with torch.no_grad():
        state = None
        if model.is_recurrent:
            state = model.reset_sequence(model.prepare_frame_input(frames, 0))
        for t in range(frames.shape[0]):
            logits, state = model.forward_frame(state, model.prepare_frame_input(frames, t))
            pred = binarize(logits)[0, 0].numpy()
            data.save_mask_image(pred, out / data.PRED_PATTERN.format(t))
    print(f"wrote {frames.shape[0]} prediction masks to {out}")
    return 0


def cmd_report(args) -> int:
    table = harness.summarize_runs(args.runs)
    out = Path(args.out)
    out.write_text(table)
    print(table)
    return 0


def render_overlay(frame: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Red-tint the mask region of a grayscale frame; (H, W, 3) uint8."""
    gray = np.clip(frame, 0.0, 1.0) * 255.0
    rgb = np.stack([gray, gray, gray], axis=-1)
    m = (mask != 0).astype(np.float64)[..., None]
    red = np.zeros_like(rgb)
    red[..., 0] = 255.0
    return np.rint(rgb * (1.0 - alpha * m) + red * alpha * m).astype(np.uint8)


def cmd_overlay(args) -> int:
    from PIL import Image

    frame_files = sorted(Path(args.video).glob("frame_*.png"))
    pred_files = sorted(Path(args.pred).glob("*.png"))
    if len(frame_files) != len(pred_files):
        raise CountMismatch(f"{len(frame_files)} frames but {len(pred_files)} predictions")
    gt_files = None
    if args.gt:
        gt_files = sorted(Path(args.gt).glob("mask_*.png"))
        if len(gt_files) != len(frame_files):
            raise CountMismatch(f"{len(frame_files)} frames but {len(gt_files)} gt masks")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (ff, pf) in enumerate(zip(frame_files, pred_files)):
        frame = data.load_frame_image(ff, canonical_size=_image_size(ff))
        pred = data.load_mask_image(pf, canonical_size=frame.shape)
        panel = render_overlay(frame, pred)
        if gt_files is not None:
            gt = data.load_mask_image(gt_files[i], canonical_size=frame.shape)
            panel = np.concatenate([panel, render_overlay(frame, gt)], axis=1)
        Image.fromarray(panel, mode="RGB").save(out / f"overlay_{i:06d}.png")
    print(f"wrote {len(frame_files)} overlays to {out}")
    return 0


def _image_size(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as img:
        w, h = img.size
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfseg",
        description="Sequence-aware ultrasound needle segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", default=None, help="count or lo:hi range per video")
    p.add_argument("--config", default=None, help="synthgen.json configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the experiment grid with cross-validation")
    p.add_argument("--config", required=True, help="experiment.json")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="stream a video and write prediction masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="render the cross-fold comparison table")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default="summary.md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overlay", help="composite predictions in red over frames")
    p.add_argument("--video", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _IO_ERRORS as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KfsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
