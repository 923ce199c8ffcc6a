"""Ultrasound video dataset: in-memory types, PNG on-disk format, augmentation.

On-disk layout:

    <root>/manifest.json
    <root>/<video dir>/frame_000000.png ...   8-bit grayscale
    <root>/<video dir>/mask_000000.png  ...   {0, 255}

Frames are held in memory as float arrays in [0, 1]; masks as uint8 {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CountMismatch,
    DecodeError,
    InvalidConfig,
    MalformedManifest,
    MissingManifest,
    ShapeError,
    UnknownVideo,
)

CANONICAL_SIZE = (256, 256)
FRAME_PATTERN = "frame_{:06d}.png"
MASK_PATTERN = "mask_{:06d}.png"
PRED_PATTERN = "pred_{:06d}.png"


@dataclass
class ImageFrame:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    frame_index: int
    video_id: str

    def validate(self) -> None:
        if self.pixels.ndim != 2:
            raise ShapeError(f"frame pixels must be 2D, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ShapeError("frame contains non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ShapeError("frame pixels outside [0, 1]")
        if self.frame_index < 0:
            raise ShapeError("frame_index must be non-negative")


@dataclass
class MaskFrame:
    pixels: np.ndarray  # (H, W) uint8 in {0, 1}
    frame_index: int
    video_id: str

    def validate(self) -> None:
        if self.pixels.ndim != 2:
            raise ShapeError(f"mask pixels must be 2D, got {self.pixels.shape}")
        vals = np.unique(self.pixels)
        if not np.isin(vals, (0, 1)).all():
            raise ShapeError(f"mask is not binary, values {vals}")


@dataclass
class VideoSequence:
    video_id: str
    frames: list[ImageFrame]
    masks: list[MaskFrame] | None = None
    fps: float = 20.0

    def __post_init__(self) -> None:
        if not self.frames:
            raise ShapeError("a video needs at least one frame")
        for i, f in enumerate(self.frames):
            if f.frame_index != i:
                raise ShapeError(f"frame indices must run 0..N-1, got {f.frame_index} at {i}")
        if self.masks is not None and len(self.masks) != len(self.frames):
            raise ShapeError(
                f"{len(self.masks)} masks for {len(self.frames)} frames in {self.video_id!r}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_masks(self) -> bool:
        return self.masks is not None

    def frame_array(self) -> np.ndarray:
        """All frames stacked as (T, H, W) float32."""
        return np.stack([f.pixels for f in self.frames]).astype(np.float32)

    def mask_array(self) -> np.ndarray:
        if self.masks is None:
            raise ShapeError(f"video {self.video_id!r} has no masks")
        return np.stack([m.pixels for m in self.masks]).astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    directory: str
    frames: int
    has_masks: bool


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    canonical_size: tuple[int, int] = CANONICAL_SIZE
    root: Path | None = None

    def __post_init__(self) -> None:
        if not self.entries:
            raise MalformedManifest("manifest has no videos")
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise MalformedManifest("duplicate video ids in manifest")
        for e in self.entries:
            if e.frames < 1:
                raise MalformedManifest(f"video {e.video_id!r} declares {e.frames} frames")

    def video_ids(self) -> list[str]:
        return [e.video_id for e in self.entries]

    def entry(self, video_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise UnknownVideo(f"video {video_id!r} not in manifest")

    def total_frames(self) -> int:
        return sum(e.frames for e in self.entries)


@dataclass
class AugmentationSpec:
    """Per-sequence rotation / intensity-jitter ranges.

    One angle and one jitter factor are drawn per sequence and applied to
    every frame; per-frame draws would corrupt the temporal signal.
    """

    rotation_degrees: tuple[float, float] = (-10.0, 10.0)
    intensity_jitter: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.rotation_degrees
        if not math.isclose(lo, -hi):
            raise InvalidConfig("rotation range must be symmetric about 0")
        jlo, jhi = self.intensity_jitter
        if not (jlo <= 1.0 <= jhi):
            raise InvalidConfig("jitter range must contain 1.0")


def load_manifest(path) -> DatasetManifest:
    """Read manifest.json and verify declared frame counts against disk."""
    root = Path(path)
    manifest_file = root / "manifest.json" if root.is_dir() else root
    if not manifest_file.exists():
        raise MissingManifest(f"no manifest at {manifest_file}")
    root = manifest_file.parent
    try:
        doc = json.loads(manifest_file.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"manifest is not valid JSON: {exc}") from exc

    try:
        size = tuple(int(v) for v in doc["canonical_size"])
        videos = doc["videos"]
        entries = [
            ManifestEntry(
                video_id=str(v["id"]),
                directory=str(v["dir"]),
                frames=int(v["frames"]),
                has_masks=bool(v["has_masks"]),
            )
            for v in videos
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"manifest field missing or wrong type: {exc}") from exc
    if len(size) != 2:
        raise MalformedManifest(f"canonical_size must be [H, W], got {size}")

    manifest = DatasetManifest(entries=entries, canonical_size=size, root=root)
    for e in manifest.entries:
        vdir = root / e.directory
        if not vdir.is_dir():
            raise CountMismatch(f"video directory missing: {vdir}")
        n_frames = len(list(vdir.glob("frame_*.png")))
        if n_frames != e.frames:
            raise CountMismatch(
                f"{e.video_id!r}: manifest declares {e.frames} frames, found {n_frames}"
            )
        if e.has_masks:
            n_masks = len(list(vdir.glob("mask_*.png")))
            if n_masks != e.frames:
                raise CountMismatch(
                    f"{e.video_id!r}: {n_masks} masks for {e.frames} frames"
                )
    return manifest


def _decode_gray(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img.convert("L")


def load_frame_image(path, canonical_size: tuple[int, int] = CANONICAL_SIZE) -> np.ndarray:
    """Decode one frame PNG to (H, W) float32 in [0, 1], bilinear-resized."""
    img = _decode_gray(Path(path))
    h, w = canonical_size
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_mask_image(path, canonical_size: tuple[int, int] = CANONICAL_SIZE) -> np.ndarray:
    """Decode one mask PNG to (H, W) uint8 {0,1}; nearest resize, threshold 0.5."""
    img = _decode_gray(Path(path))
    h, w = canonical_size
    if img.size != (w, h):
        img = img.resize((w, h), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.uint8)


def load_video(manifest: DatasetManifest, video_id: str) -> VideoSequence:
    """Load one video (frames + masks if present) at the canonical size."""
    e = manifest.entry(video_id)
    if manifest.root is None:
        raise MissingManifest("manifest has no root directory; load it from disk")
    vdir = manifest.root / e.directory
    size = manifest.canonical_size
    frames = [
        ImageFrame(load_frame_image(vdir / FRAME_PATTERN.format(i), size), i, video_id)
        for i in range(e.frames)
    ]
    masks = None
    if e.has_masks:
        masks = [
            MaskFrame(load_mask_image(vdir / MASK_PATTERN.format(i), size), i, video_id)
            for i in range(e.frames)
        ]
    return VideoSequence(video_id=video_id, frames=frames, masks=masks)


def load_video_dir(path, canonical_size: tuple[int, int] = CANONICAL_SIZE) -> VideoSequence:
    """Load a bare video directory (no manifest), e.g. for `infer`."""
    vdir = Path(path)
    frame_files = sorted(vdir.glob("frame_*.png"))
    if not frame_files:
        raise UnknownVideo(f"no frame_*.png files in {vdir}")
    frames = [
        ImageFrame(load_frame_image(p, canonical_size), i, vdir.name)
        for i, p in enumerate(frame_files)
    ]
    mask_files = sorted(vdir.glob("mask_*.png"))
    masks = None
    if mask_files:
        if len(mask_files) != len(frame_files):
            raise CountMismatch(f"{len(mask_files)} masks for {len(frame_files)} frames in {vdir}")
        masks = [
            MaskFrame(load_mask_image(p, canonical_size), i, vdir.name)
            for i, p in enumerate(mask_files)
        ]
    return VideoSequence(video_id=vdir.name, frames=frames, masks=masks)


def save_frame_image(pixels: np.ndarray, path) -> None:
    arr = np.rint(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path))


def save_mask_image(pixels: np.ndarray, path) -> None:
    arr = (np.asarray(pixels) != 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(Path(path))


def save_video(seq: VideoSequence, directory) -> None:
    """Write one video's frames (and masks) in the on-disk PNG format."""
    vdir = Path(directory)
    vdir.mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        save_frame_image(f.pixels, vdir / FRAME_PATTERN.format(f.frame_index))
    if seq.masks is not None:
        for m in seq.masks:
            save_mask_image(m.pixels, vdir / MASK_PATTERN.format(m.frame_index))


def write_manifest(entries: list[ManifestEntry], root, canonical_size=CANONICAL_SIZE) -> DatasetManifest:
    root = Path(root)
    doc = {
        "canonical_size": list(canonical_size),
        "videos": [
            {"id": e.video_id, "dir": e.directory, "frames": e.frames, "has_masks": e.has_masks}
            for e in entries
        ],
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
    return DatasetManifest(entries=entries, canonical_size=tuple(canonical_size), root=root)


def _rotate_frame(pixels: np.ndarray, angle: float) -> np.ndarray:
    img = Image.fromarray(pixels.astype(np.float32), mode="F")
    out = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0.0)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def _rotate_mask(pixels: np.ndarray, angle: float) -> np.ndarray:
    img = Image.fromarray((pixels * 255).astype(np.uint8), mode="L")
    out = img.rotate(angle, resample=Image.NEAREST, fillcolor=0)
    return (np.asarray(out, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)


def sample_augmentation(spec: AugmentationSpec, rng: np.random.Generator) -> tuple[float, float]:
    """Draw one (rotation angle, jitter factor) pair for a whole sequence."""
    lo, hi = spec.rotation_degrees
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    jlo, jhi = spec.intensity_jitter
    jitter = float(rng.uniform(jlo, jhi)) if jhi > jlo else float(jlo)
    return angle, jitter


def augment_arrays(
    frames: np.ndarray, masks: np.ndarray | None, angle: float, jitter: float
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply one rotation/jitter draw to every frame of (T, H, W) arrays."""
    if angle == 0.0 and jitter == 1.0:
        return frames, masks
    out_frames = np.empty_like(frames, dtype=np.float32)
    for t in range(frames.shape[0]):
        px = frames[t] if angle == 0.0 else _rotate_frame(frames[t], angle)
        out_frames[t] = np.clip(px * jitter, 0.0, 1.0) if jitter != 1.0 else px
    out_masks = masks
    if masks is not None and angle != 0.0:
        out_masks = np.empty_like(masks, dtype=np.uint8)
        for t in range(masks.shape[0]):
            out_masks[t] = _rotate_mask(masks[t], angle)
    return out_frames, out_masks


def augment_sequence(
    seq: VideoSequence, spec: AugmentationSpec, rng: np.random.Generator | None = None
) -> VideoSequence:
    """Rotate and intensity-jitter a whole sequence with one draw each.

    The same angle applies to every frame and mask; the same multiplicative
    jitter applies to every frame. Masks stay binary. Degenerate ranges
    collapse to the identity transform.
    """
    if seq.masks is None:
        raise ShapeError("augmentation needs a sequence with masks")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    angle, jitter = sample_augmentation(spec, rng)
    frames_arr, masks_arr = augment_arrays(seq.frame_array(), seq.mask_array(), angle, jitter)
    frames = [
        ImageFrame(frames_arr[i].astype(np.float32), f.frame_index, f.video_id)
        for i, f in enumerate(seq.frames)
    ]
    masks = [
        MaskFrame(masks_arr[i].astype(np.uint8), m.frame_index, m.video_id)
        for i, m in enumerate(seq.masks)
    ]
    return VideoSequence(video_id=seq.video_id, frames=frames, masks=masks, fps=seq.fps)
