"""Segmentation and needle-specific metrics.

Masks are 2D numpy arrays with values in {0, 1}. Pixel coordinates are
(x, y) = (column, row). Conventions that affect reported numbers:

- dice(empty, empty) = 1.0
- precision / recall with an empty denominator = 1.0
- tip and length errors are undefined when either mask is empty; such
  frames are excluded from the means and counted in detection_failure_rate
- reported std is the population std (ddof=0)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, EmptyMask, ShapeError

METRIC_COLUMNS = ("dsc", "precision", "recall", "dx", "dy", "dl")

# lower is better for the pixel-error columns, higher for the overlap scores
LOWER_IS_BETTER = {"dx", "dy", "dl"}


@dataclass(frozen=True)
class NeedleEndpoints:
    """Entry and tip pixels of a needle mask, with the shaft length in px."""

    entry: tuple[int, int]
    tip: tuple[int, int]
    length: float


@dataclass
class FrameMetrics:
    """Per-frame scores. dx/dy/dl are None when either mask is empty."""

    dsc: float
    precision: float
    recall: float
    dx: float | None
    dy: float | None
    dl: float | None
    pred_empty: bool
    gt_empty: bool
    video_id: str = ""
    frame_index: int = -1

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "dsc": self.dsc,
            "precision": self.precision,
            "recall": self.recall,
            "dx": self.dx,
            "dy": self.dy,
            "dl": self.dl,
            "pred_empty": self.pred_empty,
            "gt_empty": self.gt_empty,
        }


@dataclass
class FoldReport:
    """Mean/std per metric over the frames where the metric is defined."""

    fold_id: int
    frame_count: int
    detection_failure_rate: float
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "frame_count": self.frame_count,
            "detection_failure_rate": self.detection_failure_rate,
            "stats": {k: list(v) for k, v in self.stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        return cls(
            fold_id=int(d["fold_id"]),
            frame_count=int(d["frame_count"]),
            detection_failure_rate=float(d["detection_failure_rate"]),
            stats={k: (float(v[0]), float(v[1])) for k, v in d["stats"].items()},
        )


def _as_binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2D, got shape {arr.shape}")
    return arr != 0


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dice(pred, gt) -> float:
    """Dice score 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    _check_same_shape(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def precision_recall(pred, gt) -> tuple[float, float]:
    """(TP/(TP+FP), TP/(TP+FN)); a ratio with zero denominator is 1.0."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    _check_same_shape(p, g)
    tp = int((p & g).sum())
    n_pred = int(p.sum())
    n_gt = int(g.sum())
    precision = tp / n_pred if n_pred > 0 else 1.0
    recall = tp / n_gt if n_gt > 0 else 1.0
    return precision, recall


def extract_endpoints(mask) -> NeedleEndpoints:
    """Entry/tip pixels of a needle mask via principal-axis projection.

    Foreground pixels are projected onto the leading eigenvector of their
    coordinate covariance; the extreme-projection pixels are the shaft
    endpoints. The endpoint with the smaller x is the entry (tie: smaller
    y), the other is the tip. Ties at an extreme projection are broken
    lexicographically by (x, y), so the result is independent of pixel
    enumeration order.
    """
    m = _as_binary(mask)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise EmptyMask("cannot extract endpoints from an empty mask")
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    if coords.shape[0] == 1:
        pt = (int(xs[0]), int(ys[0]))
        return NeedleEndpoints(entry=pt, tip=pt, length=0.0)

    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]  # leading eigenvector

    proj = centered @ axis
    lo = _extreme_pixel(coords, proj, proj.min())
    hi = _extreme_pixel(coords, proj, proj.max())
    if (lo[0], lo[1]) <= (hi[0], hi[1]):
        entry, tip = lo, hi
    else:
        entry, tip = hi, lo
    length = float(np.hypot(tip[0] - entry[0], tip[1] - entry[1]))
    return NeedleEndpoints(entry=entry, tip=tip, length=length)


def _extreme_pixel(coords: np.ndarray, proj: np.ndarray, value: float) -> tuple[int, int]:
    candidates = coords[np.abs(proj - value) < 1e-9]
    order = np.lexsort((candidates[:, 1], candidates[:, 0]))
    x, y = candidates[order[0]]
    return int(x), int(y)


def needle_errors(pred, gt) -> tuple[float, float, float] | None:
    """Tip errors (|Δx|, |Δy|) and shaft-length error |ΔL| in pixels.

    Returns None when either mask is empty (the frame is a detection
    failure and must be excluded from error averages).
    """
    p = _as_binary(pred)
    g = _as_binary(gt)
    _check_same_shape(p, g)
    if p.sum() == 0 or g.sum() == 0:
        return None
    ep = extract_endpoints(p)
    eg = extract_endpoints(g)
    dx = float(abs(ep.tip[0] - eg.tip[0]))
    dy = float(abs(ep.tip[1] - eg.tip[1]))
    dl = float(abs(ep.length - eg.length))
    return dx, dy, dl


def score_frame(pred, gt, video_id: str = "", frame_index: int = -1) -> FrameMetrics:
    """All per-frame metrics for one (prediction, ground truth) pair."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    _check_same_shape(p, g)
    d = dice(p, g)
    prec, rec = precision_recall(p, g)
    errs = needle_errors(p, g)
    dx, dy, dl = errs if errs is not None else (None, None, None)
    return FrameMetrics(
        dsc=d,
        precision=prec,
        recall=rec,
        dx=dx,
        dy=dy,
        dl=dl,
        pred_empty=bool(p.sum() == 0),
        gt_empty=bool(g.sum() == 0),
        video_id=video_id,
        frame_index=frame_index,
    )


def aggregate(frames: list[FrameMetrics], fold_id: int = 0) -> FoldReport:
    """Mean and population std per metric over the frames where defined."""
    if not frames:
        raise EmptyInput("cannot aggregate an empty frame list")
    stats: dict[str, tuple[float, float]] = {}
    for name in METRIC_COLUMNS:
        values = [getattr(f, name) for f in frames if getattr(f, name) is not None]
        if values:
            arr = np.asarray(values, dtype=np.float64)
            stats[name] = (float(arr.mean()), float(arr.std()))
        else:
            stats[name] = (float("nan"), float("nan"))
    n_undefined = sum(1 for f in frames if f.dx is None)
    return FoldReport(
        fold_id=fold_id,
        frame_count=len(frames),
        detection_failure_rate=n_undefined / len(frames),
        stats=stats,
    )


def format_cell(mean: float, std: float) -> str:
    """Render one table cell as e.g. '0.39 ± 0.16'."""
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.2f} ± {std:.2f}"


def render_markdown_table(rows: dict[str, dict[str, tuple[float, float]]]) -> str:
    """Markdown comparison table: one row per model label.

    `rows` maps a row label (e.g. "V+kf") to {metric: (mean, std)}.
    The best cell within each encoder group (rows sharing the label's
    leading letter) is bolded per column, respecting metric direction.
    """
    header = "| Method | DSC(D) ↑ | Precision(P) ↑ | Recall(R) ↑ | Δx ↓ | Δy ↓ | ΔL ↓ |"
    sep = "|---" * 7 + "|"
    groups: dict[str, list[str]] = {}
    for label in rows:
        groups.setdefault(label.split("+")[0], []).append(label)

    best: dict[tuple[str, str], str] = {}
    for prefix, labels in groups.items():
        for metric in METRIC_COLUMNS:
            defined = [(lb, rows[lb][metric][0]) for lb in labels if not np.isnan(rows[lb][metric][0])]
            if not defined:
                continue
            pick = min if metric in LOWER_IS_BETTER else max
            best[(prefix, metric)] = pick(defined, key=lambda t: t[1])[0]

    lines = [header, sep]
    for label, stats in rows.items():
        prefix = label.split("+")[0]
        cells = []
        for metric in METRIC_COLUMNS:
            cell = format_cell(*stats[metric])
            if best.get((prefix, metric)) == label:
                cell = f"**{cell}**"
            cells.append(cell)
        lines.append("| " + " | ".join([label] + cells) + " |")
    return "\n".join(lines) + "\n"
