"""Scheduling, sequence inference, metrics, and cost accounting.

Frames at multiples of the group length run through the full-resolution
branch and their features are cached; every other frame runs the reduced
branch and fuses the cached keyframe features along the decoded motion.
Costs are analytic FLOPs from the same models, amortized over a group.
Curve comparison follows the classic cubic-fit-in-log-domain procedure:
fit quality versus log10(cost) for both curves, integrate the gap over the
overlapping interval, and report the mean vertical gap (quality delta) or
the mean horizontal gap mapped back through 10^x as a signed cost percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import decode_clip, estimate_motion
from .fusion import fusion_flops, warp_features
from .tensor import Tensor


@dataclass
class ScheduleEntry:
    frame_index: int
    branch: str  # "hr" or "lr"
    keyframe_index: int
    distance: int


@dataclass
class RatePoint:
    flops: float
    miou: float

    def __post_init__(self):
        if self.flops <= 0:
            raise ValueError(f"flops {self.flops} must be > 0")
        if not 0.0 <= self.miou <= 1.0:
            raise ValueError(f"miou {self.miou} outside [0, 1]")


@dataclass
class CostReport:
    hr_frame_flops: float
    lr_frame_flops: float
    creff_flops: float
    gop_length: int
    average: float
    ratio: float  # average / hr_frame_flops


@dataclass
class EvalClip:
    """Decoded frames with ground truth for one annotated frame."""

    frames: np.ndarray  # (T, C, H, W)
    labels: np.ndarray  # (H, W) integer map
    annotated_index: int


def gop_schedule(frame_count, gop_length):
    """Assign each frame its branch and keyframe: frame t belongs to
    keyframe (t // L) * L at distance t mod L; distance 0 means the
    full-resolution branch."""
    if gop_length < 1:
        raise ValueError(f"gop length {gop_length} must be >= 1")
    entries = []
    for t in range(frame_count):
        d = t % gop_length
        entries.append(ScheduleEntry(frame_index=t, branch="hr" if d == 0 else "lr",
                                     keyframe_index=t - d, distance=d))
    return entries


def frame_costs(hr_model, lr_model, fusion_config, h, w):
    """Per-frame analytic FLOPs: (keyframe cost, reduced-frame branch cost,
    fusion cost). The reduced-frame branch cost includes the shared final
    convolution on the full grid; the warp-only variant runs no reduced
    branch, only the final convolution on the warped features."""
    hr_frame = hr_model.flops_of(h, w)["total"]
    lr_frame = hr_model.final_conv_flops(h, w)
    if fusion_config.variant != "warp_only":
        lr_frame += lr_model.features_flops(h, w)["total"]
    return hr_frame, lr_frame, fusion_flops(fusion_config, h, w)


def run_sequence(clip, hr_model, lr_model, fusion_model):
    """Segment every frame of an encoded clip.

    Returns (logits, labels, flops): per-frame (K, H, W) logit arrays, the
    (T, H, W) argmax label maps, and the analytic FLOPs actually spent.
    Keyframe features are computed once per group and reused; non-keyframes
    fuse them along the frame's stored motion. Logits always come from the
    full-resolution branch's final convolution (shared during training).
    """
    frames, motions = decode_clip(clip)
    t, _, h, w = frames.shape
    hr_frame, lr_frame, creff = frame_costs(hr_model, lr_model, fusion_model.config, h, w)
    cached_features = None
    logits_out = []
    labels_out = np.empty((t, h, w), dtype=np.int64)
    flops = 0
    for entry in gop_schedule(t, clip.gop):
        frame = Tensor(frames[entry.frame_index])
        if entry.branch == "hr":
            cached_features = hr_model.forward_features(frame)
            logits = hr_model.forward_logits(cached_features)
            flops += hr_frame
        else:
            if cached_features is None:
                raise ValueError(
                    f"frame {entry.frame_index}: no cached keyframe features"
                )
            motion = motions[entry.frame_index]
            if motion is None:
                raise ValueError(
                    f"frame {entry.frame_index}: predicted slot carries no motion"
                )
            dense = motion.expand(h, w)
            if fusion_model.config.variant == "warp_only":
                fused = warp_features(cached_features, dense)
            else:
                cur = lr_model.forward_features(frame)
                fused = fusion_model.forward(cached_features, dense, cur)
            logits = hr_model.forward_logits(fused)
            flops += lr_frame + creff
        logits_out.append(logits.data)
        labels_out[entry.frame_index] = np.argmax(logits.data, axis=0)
    return logits_out, labels_out, flops


def sequence_flops(frame_count, gop_length, hr_frame, lr_frame, creff):
    """Schedule-derived total cost; the audit twin of run_sequence's tally."""
    total = 0
    for entry in gop_schedule(frame_count, gop_length):
        total += hr_frame if entry.branch == "hr" else lr_frame + creff
    return total


def confusion(pred, gt, classes, ignore_index=-1):
    """Class-by-class pixel counts: rows are ground truth, columns are
    predictions; pixels whose ground truth equals ignore_index drop out."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: shapes {pred.shape} and {gt.shape} differ")
    valid = gt != ignore_index
    if ((gt[valid] < 0) | (gt[valid] >= classes)).any():
        raise ValueError(f"confusion: ground-truth labels outside [0, {classes})")
    if ((pred[valid] < 0) | (pred[valid] >= classes)).any():
        raise ValueError(f"confusion: predicted labels outside [0, {classes})")
    idx = classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def miou_from_confusion(conf):
    """(mean IoU, per-class IoU). Classes absent from both prediction and
    ground truth score NaN and are excluded from the mean; an all-absent
    matrix yields NaN overall."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    if np.isnan(per_class).all():
        return float("nan"), per_class
    return float(np.nanmean(per_class)), per_class


def miou(pred, gt, classes, ignore_index=-1):
    return miou_from_confusion(confusion(pred, gt, classes, ignore_index))


def miou_by_distance(clips, hr_model, lr_model, fusion_model, gop_length,
                     block_size, search_range):
    """Score one annotated frame per clip at every keyframe distance.

    For distance d the keyframe is the annotated frame's d-th predecessor;
    motion between them is estimated directly by the codec's search. Pixel
    counts pool across clips per distance. Returns (rows, overall) where
    rows are (d, miou_d, cells, skipped) and overall is the mean of the
    per-distance column.
    """
    classes = hr_model.config.classes
    rows = []
    for d in range(gop_length):
        conf = np.zeros((classes, classes), dtype=np.int64)
        cells = 0
        skipped = 0
        for clip in clips:
            p = clip.annotated_index
            if p - d < 0:
                skipped += 1
                continue
            frame = Tensor(clip.frames[p])
            if d == 0:
                logits = hr_model.forward_logits(hr_model.forward_features(frame))
            else:
                key = Tensor(clip.frames[p - d])
                key_feat = hr_model.forward_features(key)
                motion = estimate_motion(clip.frames[p], clip.frames[p - d],
                                         block_size, search_range)
                dense = motion.expand(*clip.frames.shape[2:])
                if fusion_model.config.variant == "warp_only":
                    fused = warp_features(key_feat, dense)
                else:
                    cur = lr_model.forward_features(frame)
                    fused = fusion_model.forward(key_feat, dense, cur)
                logits = hr_model.forward_logits(fused)
            pred = np.argmax(logits.data, axis=0)
            conf += confusion(pred, clip.labels, classes)
            cells += 1
        value, _ = miou_from_confusion(conf) if cells else (float("nan"), None)
        rows.append((d, value, cells, skipped))
    overall = float(np.nanmean([r[1] for r in rows]))
    return rows, overall


def amortized_cost(hr_flops, lr_flops, creff_flops, gop_length):
    """Average per-frame cost of one keyframe plus L-1 fused frames."""
    if gop_length < 1:
        raise ValueError(f"gop length {gop_length} must be >= 1")
    if min(hr_flops, lr_flops, creff_flops) < 0:
        raise ValueError("flops must be >= 0")
    average = (hr_flops + (gop_length - 1) * (lr_flops + creff_flops)) / gop_length
    ratio = average / hr_flops if hr_flops > 0 else float("nan")
    return CostReport(hr_frame_flops=hr_flops, lr_frame_flops=lr_flops,
                      creff_flops=creff_flops, gop_length=gop_length,
                      average=average, ratio=ratio)


def _fit(xs, ys):
    return np.polyfit(xs, ys, min(3, len(xs) - 1))


def _mean_gap(anchor_x, anchor_y, test_x, test_y):
    lo = max(anchor_x.min(), test_x.min())
    hi = min(anchor_x.max(), test_x.max())
    if hi <= lo:
        return None, (anchor_x.min(), anchor_x.max()), (test_x.min(), test_x.max())
    diff = np.polysub(_fit(test_x, test_y), _fit(anchor_x, anchor_y))
    integral = np.polyint(diff)
    gap = (np.polyval(integral, hi) - np.polyval(integral, lo)) / (hi - lo)
    return float(gap), None, None


def bd_metrics(anchor, test):
    """Mean quality and cost deltas between two rate curves.

    Both curves are sequences of at least two RatePoints. The first return
    value is the mean vertical quality gap of test over anchor across the
    overlapping log10-cost interval; the second is the mean horizontal gap
    re-expressed as a signed cost change in percent. A component whose
    curves do not overlap on its integration axis is NaN; if neither
    overlaps, the ranges are reported in an error.
    """
    for name, curve in (("anchor", anchor), ("test", test)):
        if len(curve) < 2:
            raise ValueError(f"{name} curve needs >= 2 points, got {len(curve)}")
    ax = np.array([math.log10(p.flops) for p in anchor])
    ay = np.array([p.miou for p in anchor])
    tx = np.array([math.log10(p.flops) for p in test])
    ty = np.array([p.miou for p in test])
    quality_gap, a_range, t_range = _mean_gap(ax, ay, tx, ty)
    cost_gap, a_qrange, t_qrange = _mean_gap(ay, ax, ty, tx)
    if quality_gap is None and cost_gap is None:
        raise ValueError(
            f"curves do not overlap: log10-flops ranges {a_range} vs {t_range}, "
            f"miou ranges {a_qrange} vs {t_qrange}"
        )
    bd_miou = float("nan") if quality_gap is None else quality_gap
    bd_flops = float("nan") if cost_gap is None else (10.0 ** cost_gap - 1.0) * 100.0
    return bd_miou, bd_flops


def save_curve(path, points):
    with open(path, "w") as fh:
        fh.write("flops,miou\n")
        for p in points:
            fh.write(f"{p.flops!r},{p.miou!r}\n")


def load_curve(path):
    points = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "flops,miou":
            raise ValueError(f"{path}: expected header 'flops,miou', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            try:
                points.append(RatePoint(flops=float(parts[0]), miou=float(parts[1])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return points
