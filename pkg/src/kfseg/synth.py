"""Deterministic synthetic ultrasound-needle video generator.

Reproduces the challenge modes the segmentation task is built around:
speckle and low-frequency tissue texture, dark vessel ellipses, bright
needle-like distractor lines, mid-shaft occlusion bands, a faint needle
tip, insertion jerks, needle bow, and probe random-walk translation.

Ground-truth masks rasterize the full needle polyline, including occluded
sections; occlusion only attenuates image intensities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data
from .errors import InvalidConfig, IoError, MalformedManifest, OutOfBounds

_CANVAS_PAD = 32
_EDGE_MARGIN = 9.0


@dataclass
class NeedleSpec:
    angle_deg: tuple[float, float] = (15.0, 45.0)
    width_px: float = 2.0
    bend_amplitude: float = 4.0
    jerk_rate: float = 0.08          # Poisson events per frame
    jerk_px: tuple[float, float] = (2.0, 6.0)
    brightness: float = 0.95
    tip_fade: float = 0.5            # brightness multiplier lost at the tip
    depth_fractions: tuple[float, float] = (0.25, 0.92)


@dataclass
class SpeckleSpec:
    rayleigh_scale: float = 0.8
    texture_octaves: int = 3
    texture_range: tuple[float, float] = (0.08, 0.35)


@dataclass
class OcclusionSpec:
    band_count: int = 1
    band_width_px: float = 24.0
    attenuation: float = 0.25


@dataclass
class ArtifactSpec:
    n_distractor_lines: int = 2
    brightness: float = 0.75


@dataclass
class SynthConfig:
    seed: int = 0
    n_frames: int = 80
    image_size: int = 256
    probe_step_px: float = 1.0
    needle: NeedleSpec = field(default_factory=NeedleSpec)
    speckle: SpeckleSpec = field(default_factory=SpeckleSpec)
    occlusion: OcclusionSpec = field(default_factory=OcclusionSpec)
    artifacts: ArtifactSpec = field(default_factory=ArtifactSpec)

    def __post_init__(self) -> None:
        if self.n_frames < 1 or self.image_size < 32:
            raise InvalidConfig("need n_frames >= 1 and image_size >= 32")
        if self.probe_step_px < 0 or self.probe_step_px > 2:
            raise InvalidConfig("probe_step_px must be in [0, 2]")
        if not (0.0 <= self.occlusion.attenuation <= 1.0):
            raise InvalidConfig("attenuation must be in [0, 1]")
        lo, hi = self.needle.angle_deg
        if not (0.0 < lo <= hi < 90.0):
            raise InvalidConfig("needle angles must lie in (0, 90) degrees")
        if self.needle.width_px <= 0 or self.needle.bend_amplitude < 0:
            raise InvalidConfig("needle geometry magnitudes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key, spec_cls in (
            ("needle", NeedleSpec),
            ("speckle", SpeckleSpec),
            ("occlusion", OcclusionSpec),
            ("artifacts", ArtifactSpec),
        ):
            if key in d and isinstance(d[key], dict):
                sub = {
                    k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()
                }
                d[key] = spec_cls(**sub)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise InvalidConfig(f"cannot read synth config {path}: {exc}") from exc


@dataclass
class NeedleTrajectory:
    """Per-frame quadratic-Bezier control polygon plus insertion depth."""

    entries: np.ndarray   # (T, 2) x, y
    controls: np.ndarray  # (T, 2)
    tips: np.ndarray      # (T, 2)
    depths: np.ndarray    # (T,)

    def polyline(self, t: int, samples: int = 128) -> np.ndarray:
        """Points along the frame-t curve, (samples, 2)."""
        u = np.linspace(0.0, 1.0, samples)[:, None]
        p0, p1, p2 = self.entries[t], self.controls[t], self.tips[t]
        return (1 - u) ** 2 * p0 + 2 * u * (1 - u) * p1 + u**2 * p2


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _bezier_arclength(p0, p1, p2, samples: int = 200) -> float:
    u = np.linspace(0.0, 1.0, samples)[:, None]
    pts = (1 - u) ** 2 * p0 + 2 * u * (1 - u) * p1 + u**2 * p2
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _chord_for_arclength(entry, direction, normal, bow: float, target: float) -> float:
    """Chord length whose bowed Bezier has arc length `target` (<= 0.05 px)."""
    def arc(c: float) -> float:
        p2 = entry + c * direction
        p1 = entry + 0.5 * c * direction + bow * normal
        return _bezier_arclength(entry, p1, p2)

    lo, hi = 0.25 * target, target
    if arc(hi) < target:  # bow shortens nothing; straight chord suffices
        return target
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if arc(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 0.01:
            break
    return 0.5 * (lo + hi)


def generate_trajectory(cfg: SynthConfig) -> NeedleTrajectory:
    """Insertion from the left edge: smoothstep depth profile, Poisson jerk
    impulses, quadratic bow growing with depth. Pure function of cfg."""
    rng = np.random.default_rng([cfg.seed, 1])
    size = float(cfg.image_size)
    m = _EDGE_MARGIN

    angle = np.deg2rad(rng.uniform(*cfg.needle.angle_deg))
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-np.sin(angle), np.cos(angle)]) * rng.choice([-1.0, 1.0])
    entry = np.array([1.5, rng.uniform(m, size / 3.0)])

    max_len = min((size - m - entry[1]) / direction[1], (size - m - entry[0]) / direction[0])
    f0, f1 = cfg.needle.depth_fractions
    t_grid = np.arange(cfg.n_frames, dtype=np.float64)
    base = max_len * (f0 + (f1 - f0) * _smoothstep(t_grid / max(cfg.n_frames - 1, 1)))
    jerks = rng.poisson(cfg.needle.jerk_rate, cfg.n_frames) * rng.uniform(
        *cfg.needle.jerk_px, size=cfg.n_frames
    )
    depths = np.minimum(base + np.cumsum(jerks), 0.98 * max_len)

    entries = np.tile(entry, (cfg.n_frames, 1))
    controls = np.empty((cfg.n_frames, 2))
    tips = np.empty((cfg.n_frames, 2))
    for t in range(cfg.n_frames):
        bow = cfg.needle.bend_amplitude * depths[t] / max_len
        chord = _chord_for_arclength(entry, direction, normal, bow, depths[t])
        tips[t] = entry + chord * direction
        controls[t] = entry + 0.5 * chord * direction + bow * normal
    return NeedleTrajectory(entries=entries, controls=controls, tips=tips, depths=depths)


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(coarse.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


def _tissue_texture(rng: np.random.Generator, size: int, spec: SpeckleSpec) -> np.ndarray:
    acc = np.zeros((size, size))
    weight = 1.0
    total = 0.0
    for octave in range(spec.texture_octaves):
        coarse = rng.random((8 * 2**octave, 8 * 2**octave))
        acc += weight * _upsample(coarse, size)
        total += weight
        weight *= 0.5
    acc /= total
    lo, hi = spec.texture_range
    amin, amax = acc.min(), acc.max()
    return lo + (hi - lo) * (acc - amin) / max(amax - amin, 1e-9)


def _segment_distance_param(points: np.ndarray, xs, ys):
    """Distance from grid pixels to a polyline and the arclength parameter
    (0..1) of the nearest point. points is (Q, 2) in x, y order."""
    n_seg = max(points.shape[0] - 1, 1)
    best_d2 = np.full(xs.shape, np.inf)
    best_param = np.zeros(xs.shape)
    for i in range(n_seg):
        a, b = points[i], points[i + 1]
        abx, aby = b[0] - a[0], b[1] - a[1]
        ab2 = max(abx * abx + aby * aby, 1e-12)
        t = np.clip(((xs - a[0]) * abx + (ys - a[1]) * aby) / ab2, 0.0, 1.0)
        dx = xs - (a[0] + t * abx)
        dy = ys - (a[1] + t * aby)
        d2 = dx * dx + dy * dy
        better = d2 < best_d2
        best_d2[better] = d2[better]
        best_param[better] = (i + t[better]) / n_seg
    return np.sqrt(best_d2), best_param


def _line_profile(points: np.ndarray, size: int, width: float, segments: int = 48):
    """(intensity profile, arclength param, mask) restricted to a bounding box.

    Intensity is a flat-core super-Gaussian exp(-(d/width)^4 / 2); the mask
    is d <= width.
    """
    step = max(points.shape[0] // segments, 1)
    pts = points[::step]
    if not np.array_equal(pts[-1], points[-1]):
        pts = np.vstack([pts, points[-1]])

    reach = int(np.ceil(2.5 * width)) + 1
    x0 = max(int(points[:, 0].min()) - reach, 0)
    x1 = min(int(points[:, 0].max()) + reach + 1, size)
    y0 = max(int(points[:, 1].min()) - reach, 0)
    y1 = min(int(points[:, 1].max()) + reach + 1, size)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dist, param = _segment_distance_param(pts, xs, ys)

    profile = np.zeros((size, size))
    params = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=np.uint8)
    profile[y0:y1, x0:x1] = np.exp(-0.5 * (dist / width) ** 4)
    params[y0:y1, x0:x1] = param
    mask[y0:y1, x0:x1] = (dist <= width).astype(np.uint8)
    return profile, params, mask


def _vessel_field(rng: np.random.Generator, size: int) -> np.ndarray:
    field_ = np.ones((size, size))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        rx = rng.uniform(0.05 * size, 0.12 * size)
        ry = rx * rng.uniform(0.6, 1.0)
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        field_[inside] *= 0.35
    return field_


def render_video(cfg: SynthConfig, traj: NeedleTrajectory) -> data.VideoSequence:
    """Render frames + ground-truth masks for a trajectory."""
    size = cfg.image_size
    span = traj.tips.max(initial=0.0)
    if span >= size or traj.tips.min(initial=size) < 0 or traj.entries.min() < 0:
        raise OutOfBounds("trajectory leaves the frame")

    rng = np.random.default_rng([cfg.seed, 2])
    canvas_size = size + 2 * _CANVAS_PAD
    texture = _tissue_texture(rng, canvas_size, cfg.speckle)
    texture *= _vessel_field(rng, canvas_size)
    speckle = rng.rayleigh(cfg.speckle.rayleigh_scale, (canvas_size, canvas_size))
    canvas = texture * speckle

    # static needle-like distractor lines live on the tissue canvas
    for _ in range(cfg.artifacts.n_distractor_lines):
        ang = np.deg2rad(rng.uniform(10.0, 50.0))
        length = rng.uniform(0.3, 0.6) * size
        ax = rng.uniform(_CANVAS_PAD, canvas_size - _CANVAS_PAD - length * np.cos(ang))
        ay = rng.uniform(_CANVAS_PAD, canvas_size - _CANVAS_PAD - length * np.sin(ang))
        u = np.linspace(0.0, 1.0, 64)[:, None]
        pts = np.array([ax, ay]) + u * length * np.array([np.cos(ang), np.sin(ang)])
        profile, _, _ = _line_profile(pts, canvas_size, cfg.needle.width_px)
        canvas += cfg.artifacts.brightness * profile

    # occlusion bands: vertical strips over the mid-shaft x-range
    occ = np.ones((size, size))
    final_tip_x = traj.tips[-1, 0]
    for _ in range(cfg.occlusion.band_count):
        center = rng.uniform(0.35, 0.65) * final_tip_x
        half = cfg.occlusion.band_width_px / 2.0
        x0 = int(np.clip(center - half, 0, size))
        x1 = int(np.clip(center + half, 0, size))
        occ[:, x0:x1] = cfg.occlusion.attenuation

    # probe random walk: integer canvas offsets, cumulative and clipped
    steps = rng.integers(
        -round(cfg.probe_step_px), round(cfg.probe_step_px) + 1, size=(cfg.n_frames, 2)
    )
    steps[0] = 0
    offsets = np.clip(np.cumsum(steps, axis=0), -_CANVAS_PAD, _CANVAS_PAD)

    frames, masks = [], []
    for t in range(cfg.n_frames):
        oy, ox = offsets[t, 0] + _CANVAS_PAD, offsets[t, 1] + _CANVAS_PAD
        bg = canvas[oy : oy + size, ox : ox + size]

        points = traj.polyline(t)
        profile, param, mask = _line_profile(points, size, cfg.needle.width_px)
        taper = 1.0 - cfg.needle.tip_fade * _smoothstep((param - 0.8) / 0.2)
        needle = cfg.needle.brightness * profile * taper * occ

        pixels = np.clip(bg + needle, 0.0, 1.0).astype(np.float32)
        frames.append(data.ImageFrame(pixels, t, f"synth{cfg.seed}"))
        masks.append(data.MaskFrame(mask, t, f"synth{cfg.seed}"))
    return data.VideoSequence(video_id=f"synth{cfg.seed}", frames=frames, masks=masks)


def generate_video(cfg: SynthConfig) -> tuple[data.VideoSequence, NeedleTrajectory]:
    traj = generate_trajectory(cfg)
    return render_video(cfg, traj), traj


def generate_dataset(
    cfg: SynthConfig, n_videos: int, out_dir, frames_range: tuple[int, int] | None = None
) -> data.DatasetManifest:
    """Write an on-disk dataset of `n_videos` synthetic videos.

    Video i uses seed cfg.seed + i; with `frames_range`, per-video frame
    counts are sampled from it. Regeneration is byte-identical.
    """
    if n_videos < 1:
        raise MalformedManifest("a dataset needs at least one video")
    out = Path(out_dir)
    count_rng = np.random.default_rng([cfg.seed, 3])
    entries = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(n_videos):
            n_frames = cfg.n_frames
            if frames_range is not None:
                n_frames = int(count_rng.integers(frames_range[0], frames_range[1] + 1))
            vcfg = replace(cfg, seed=cfg.seed + i, n_frames=n_frames)
            video, _ = generate_video(vcfg)
            video_id = f"v{i:03d}"
            video.video_id = video_id
            data.save_video(video, out / video_id)
            entries.append(
                data.ManifestEntry(video_id=video_id, directory=video_id, frames=n_frames, has_masks=True)
            )
        manifest = data.write_manifest(entries, out, canonical_size=(cfg.image_size, cfg.image_size))
    except OSError as exc:
        raise IoError(f"cannot write dataset under {out}: {exc}") from exc
    return manifest
