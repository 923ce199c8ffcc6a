"""Cross-validated training and evaluation.

Training follows the sequence regime: recurrent blocks see windows of 7-10
consecutive frames, the loss is averaged over the window, and the weights
update once per window through backpropagation through the whole rollout.
Stateless blocks train on independent frames. Inference streams one frame
at a time, carrying hidden state across a whole video.

Everything is a deterministic function of the seeds involved: fold
assignment, window sampling, augmentation draws, and parameter init.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as metrics_mod
from .data import AugmentationSpec, DatasetManifest, load_video, sample_augmentation, augment_arrays
from .decoder import binarize
from .errors import NonFiniteLoss, TooFewVideos
from .model import ModelConfig, SequenceModel, build_model, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-3
    scheduler_factor: float = 0.7
    scheduler_patience: int = 20
    epochs: int = 10
    batch_size_stateless: int = 8
    batch_size_recurrent: int = 4
    seq_len_range: tuple[int, int] = (7, 10)
    seed: int = 0
    grad_clip: float | None = None
    steps_per_epoch: int | None = None  # default: one pass worth of frames
    augment: AugmentationSpec | None = field(default_factory=AugmentationSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "seq_len_range" in d:
            d["seq_len_range"] = tuple(d["seq_len_range"])
        if d.get("augment") is not None:
            aug = dict(d["augment"])
            aug["rotation_degrees"] = tuple(aug["rotation_degrees"])
            aug["intensity_jitter"] = tuple(aug["intensity_jitter"])
            d["augment"] = AugmentationSpec(**aug)
        return cls(**d)


@dataclass
class FoldSpec:
    fold_id: int
    train_videos: list[str]
    test_videos: list[str]
    train_frames: int
    test_frames: int

    def to_dict(self) -> dict:
        return asdict(self)


def cross_val_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[FoldSpec]:
    """Video-level folds balanced by frame count.

    Videos are shuffled (seeded), stably sorted largest-first, and each
    assigned to the currently lightest fold, so fold frame counts stay
    within a small band of the mean while ties break randomly.
    """
    entries = list(manifest.entries)
    if len(entries) < k:
        raise TooFewVideos(f"{len(entries)} videos cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    shuffled = [entries[i] for i in order]
    shuffled.sort(key=lambda e: -e.frames)

    fold_videos: list[list[str]] = [[] for _ in range(k)]
    fold_frames = [0] * k
    for e in shuffled:
        lightest = min(range(k), key=lambda i: fold_frames[i])
        fold_videos[lightest].append(e.video_id)
        fold_frames[lightest] += e.frames

    by_id = {e.video_id: e.frames for e in entries}
    folds = []
    for fid in range(k):
        test = sorted(fold_videos[fid])
        train = sorted(v for v in by_id if v not in test)
        assert not set(train) & set(test), "fold leakage"
        folds.append(
            FoldSpec(
                fold_id=fid,
                train_videos=train,
                test_videos=test,
                train_frames=sum(by_id[v] for v in train),
                test_frames=sum(by_id[v] for v in test),
            )
        )
    return folds


def sequence_loss(model: SequenceModel, state, frames: torch.Tensor, masks: torch.Tensor):
    """Mean per-pixel BCE-with-logits, averaged over the window's frames.

    frames/masks are (B, T, 1, H, W); gradient flows through the recurrent
    state across the whole window (no truncation).
    """
    total = frames.new_zeros(())
    n = frames.shape[1]
    for t in range(n):
        logits, state = model.forward_frame(state, frames[:, t])
        total = total + F.binary_cross_entropy_with_logits(logits, masks[:, t])
    return total / n


class _InMemoryFold:
    """Train-side videos preloaded as float arrays for window sampling."""

    def __init__(self, manifest: DatasetManifest, video_ids: list[str]):
        self.frames: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        for vid in video_ids:
            seq = load_video(manifest, vid)
            self.frames[vid] = seq.frame_array()
            self.masks[vid] = seq.mask_array()
        self.video_ids = list(video_ids)

    def lengths(self) -> dict[str, int]:
        return {v: self.frames[v].shape[0] for v in self.video_ids}


def _sample_window(store: _InMemoryFold, rng: np.random.Generator, length: int,
                   augment: AugmentationSpec | None):
    lengths = store.lengths()
    eligible = [v for v in store.video_ids if lengths[v] >= length]
    if not eligible:
        raise TooFewVideos(f"no train video has >= {length} frames")
    weights = np.array([lengths[v] - length + 1 for v in eligible], dtype=np.float64)
    vid = eligible[rng.choice(len(eligible), p=weights / weights.sum())]
    start = int(rng.integers(0, lengths[vid] - length + 1))
    frames = store.frames[vid][start : start + length]
    masks = store.masks[vid][start : start + length]
    if augment is not None:
        angle, jitter = sample_augmentation(augment, rng)
        frames, masks = augment_arrays(frames, masks, angle, jitter)
    return frames, masks


def _window_batch(store, rng, batch_size: int, length: int, augment):
    fs, ms = [], []
    for _ in range(batch_size):
        f, m = _sample_window(store, rng, length, augment)
        fs.append(f)
        ms.append(m)
    frames = torch.from_numpy(np.stack(fs)).float().unsqueeze(2)  # (B, T, 1, H, W)
    masks = torch.from_numpy(np.stack(ms)).float().unsqueeze(2)
    return frames, masks


def _stacked_batch(store, rng, batch_size: int, depth: int, augment):
    from .blocks import stack_window

    lengths = store.lengths()
    xs, ys = [], []
    for _ in range(batch_size):
        weights = np.array([lengths[v] for v in store.video_ids], dtype=np.float64)
        vid = store.video_ids[rng.choice(len(store.video_ids), p=weights / weights.sum())]
        t = int(rng.integers(0, lengths[vid]))
        lo = max(0, t - depth + 1)
        frames = store.frames[vid][lo : t + 1]
        masks = store.masks[vid][lo : t + 1]
        if augment is not None:
            angle, jitter = sample_augmentation(augment, rng)
            frames, masks = augment_arrays(frames, masks, angle, jitter)
        xs.append(stack_window(frames, frames.shape[0] - 1, depth))
        ys.append(masks[-1])
    x = torch.from_numpy(np.stack(xs)).float()           # (B, depth, H, W)
    y = torch.from_numpy(np.stack(ys)).float().unsqueeze(1)
    return x, y


def train_fold(
    train_cfg: TrainConfig,
    fold: FoldSpec,
    model_cfg: ModelConfig,
    manifest: DatasetManifest,
    out_dir=None,
):
    """Train one model on one fold; returns (model, loss_trace, epoch_means).

    When out_dir is given, writes model.ckpt/model.json and loss_trace.csv.
    """
    assert not set(fold.train_videos) & set(fold.test_videos), "fold leakage"
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=train_cfg.scheduler_factor, patience=train_cfg.scheduler_patience
    )
    rng = np.random.default_rng([train_cfg.seed, fold.fold_id])
    store = _InMemoryFold(manifest, fold.train_videos)

    recurrent = model.is_recurrent
    batch_size = train_cfg.batch_size_recurrent if recurrent else train_cfg.batch_size_stateless
    lo, hi = train_cfg.seq_len_range
    mean_len = (lo + hi) / 2 if recurrent else 1
    steps = train_cfg.steps_per_epoch
    if steps is None:
        steps = max(1, int(fold.train_frames // (batch_size * mean_len)))

    trace: list[float] = []
    epoch_means: list[float] = []
    for _epoch in range(train_cfg.epochs):
        epoch_losses = []
        for _step in range(steps):
            if recurrent:
                length = int(rng.integers(lo, hi + 1))
                frames, masks = _window_batch(store, rng, batch_size, length, train_cfg.augment)
                state = model.reset_sequence(frames[:, 0])
                loss = sequence_loss(model, state, frames, masks)
            elif model.config.block.kind == "stack":
                x, y = _stacked_batch(store, rng, batch_size, model.config.block.stack_depth,
                                      train_cfg.augment)
                logits, _ = model.forward_frame(None, x)
                loss = F.binary_cross_entropy_with_logits(logits, y)
            else:
                frames, masks = _window_batch(store, rng, batch_size, 1, train_cfg.augment)
                logits, _ = model.forward_frame(None, frames[:, 0])
                loss = F.binary_cross_entropy_with_logits(logits, masks[:, 0])

            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {_epoch} step {_step} "
                    f"(config {model_cfg.label}, fold {fold.fold_id})"
                )
            optimizer.zero_grad()
            loss.backward()
            if train_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            optimizer.step()
            trace.append(float(loss))
            epoch_losses.append(float(loss))
        epoch_mean = float(np.mean(epoch_losses))
        epoch_means.append(epoch_mean)
        scheduler.step(epoch_mean)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metadata = {
            "fold": fold.fold_id,
            "seed": train_cfg.seed,
            "epochs": train_cfg.epochs,
            "label": model_cfg.label,
            "test_videos": fold.test_videos,
            "final_epoch_loss": epoch_means[-1],
        }
        save_checkpoint(model, optimizer, metadata, out / "model.ckpt")
        with open(out / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, value in enumerate(trace):
                writer.writerow([i, f"{value:.10f}"])
    return model, trace, epoch_means


def evaluate_video(model, frames: np.ndarray, gt_masks: np.ndarray, video_id: str = ""):
    """Stream one video statefully and score every frame."""
    records = []
    with torch.no_grad():
        state = None
        if getattr(model, "is_recurrent", False):
            state = model.reset_sequence(model.prepare_frame_input(frames, 0))
        for t in range(frames.shape[0]):
            x = model.prepare_frame_input(frames, t)
            logits, state = model.forward_frame(state, x)
            pred = binarize(logits)[0, 0].numpy()
            records.append(metrics_mod.score_frame(pred, gt_masks[t], video_id, t))
    return records


def evaluate_fold(model, fold: FoldSpec, manifest: DatasetManifest):
    """FoldReport plus per-frame records over the fold's test videos."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    records: list[metrics_mod.FrameMetrics] = []
    for vid in fold.test_videos:
        seq = load_video(manifest, vid)
        records.extend(evaluate_video(model, seq.frame_array(), seq.mask_array(), vid))
    if was_training and hasattr(model, "train"):
        model.train()
    return metrics_mod.aggregate(records, fold_id=fold.fold_id), records


def write_metrics_json(report: metrics_mod.FoldReport, records, path) -> None:
    doc = {"report": report.to_dict(), "frames": [r.to_dict() for r in records]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def run_experiment(
    grid: list[ModelConfig],
    train_cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir,
    k: int = 5,
    folds: list[int] | None = None,
) -> Path:
    """Train/evaluate every (config, fold) pair and write a summary table.

    One configuration crashing is recorded in its run directory and does
    not abort the rest of the grid.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fold_specs = cross_val_split(manifest, k=k, seed=train_cfg.seed)
    if folds is not None:
        fold_specs = [f for f in fold_specs if f.fold_id in folds]

    for cfg in grid:
        for fold in fold_specs:
            run_dir = out / cfg.label / f"fold{fold.fold_id}"
            run_dir.mkdir(parents=True, exist_ok=True)
            try:
                model, _, _ = train_fold(train_cfg, fold, cfg, manifest, out_dir=run_dir)
                report, records = evaluate_fold(model, fold, manifest)
                write_metrics_json(report, records, run_dir / "metrics.json")
            except Exception as exc:  # isolate per-config failures
                (run_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
    summary = summarize_runs(out)
    (out / "summary.md").write_text(summary)
    return out


def summarize_runs(runs_dir) -> str:
    """Cross-fold mean ± std table over all completed runs in a directory."""
    runs = Path(runs_dir)
    rows: dict[str, dict[str, tuple[float, float]]] = {}
    for config_dir in sorted(p for p in runs.iterdir() if p.is_dir()):
        reports = []
        for metrics_file in sorted(config_dir.glob("fold*/metrics.json")):
            doc = json.loads(metrics_file.read_text())
            reports.append(metrics_mod.FoldReport.from_dict(doc["report"]))
        if not reports:
            continue
        stats = {}
        for name in metrics_mod.METRIC_COLUMNS:
            vals = [r.stats[name][0] for r in reports if not math.isnan(r.stats[name][0])]
            if vals:
                arr = np.asarray(vals)
                stats[name] = (float(arr.mean()), float(arr.std()))
            else:
                stats[name] = (float("nan"), float("nan"))
        rows[config_dir.name] = stats
    if not rows:
        raise FileNotFoundError(f"no completed runs under {runs}")
    return metrics_mod.render_markdown_table(rows)
