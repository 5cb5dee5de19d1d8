"""Deterministic moving-shapes clips for training and evaluation.

Each clip is a textured background with two textured shapes sliding over
it at constant integer velocities: a thin bar (class 1) and a disc
(class 2). Pixels are quantized to a 1/256 lattice, which keeps every
codec round trip exact. Several properties are deliberate probes of the
pipeline:

* the bar is near the resolution limit of a half-scale branch, so
  full-resolution keyframe features genuinely help;
* luminance drifts slowly over time with a vertical gradient, so features
  warped from a keyframe grow stale in proportion to the distance;
* the disc radius breathes from frame to frame, so a rigid block warp
  cannot track its boundary exactly even when its motion vector is right;
* half the discs slide into view late in the clip, so early keyframes
  simply do not contain them and only the current frame can supply the
  evidence.

Both shapes are fully inside the frame by the final frame, so a clip's
last frame always shows all three classes. Everything is a pure function
of the seed.
"""

from __future__ import annotations

import numpy as np

LATTICE = 256.0


def _quantize(a):
    return np.round(a * LATTICE) / LATTICE


def _smooth_background(rng, height, width):
    """Static textured backdrop. One blur pass keeps block-scale contrast,
    so motion vectors that drag background along with an object leave a
    visible smear instead of landing on more of the same flat value."""
    field = rng.uniform(0.08, 0.52, size=(height + 4, width + 4))
    kernel = np.ones(3) / 3.0
    for axis in (0, 1):
        field = np.apply_along_axis(np.convolve, axis, field, kernel, mode="same")
    field = field + rng.uniform(-0.06, 0.06, size=field.shape)
    return np.clip(field[2:height + 2, 2:width + 2], 0.0, 0.55)


def _plan_track(rng, span, size, steps, max_speed):
    """Start position and velocity keeping [pos, pos+size) inside [0, span).

    Velocity is in half-pixels per frame, so half the moving objects travel
    at a fractional speed the integer block grid cannot represent exactly.
    """
    for _ in range(32):
        v = int(rng.integers(-2 * max_speed, 2 * max_speed + 1))
        disp = (np.arange(steps) * v) // 2
        lo = max(0, -int(disp.min()))
        hi = min(span - size, span - size - int(disp.max()))
        if hi >= lo:
            return int(rng.integers(lo, hi + 1)), v
    return (span - size) // 2, 0


def _plan_entry(rng, span, size, steps):
    """Track that slides in from a border and is fully inside only in the
    last few frames, so earlier frames miss part or all of the object.

    Velocity is in half-pixels per frame like `_plan_track`; entries move
    at a brisk three pixels per frame."""
    speed = 3
    entry = steps - 1 - int(rng.integers(0, 3))
    back = speed * (steps - 1 - entry) + int(rng.integers(0, speed))
    if rng.random() < 0.5:
        final = min(back, span - size)
        return final - (steps - 1) * speed, 2 * speed
    final = max(span - size - back, 0)
    return final + (steps - 1) * speed, -2 * speed


def _paste(canvas, label, top, left, tex, mask, cls):
    """Composite a masked texture patch, clipping at the frame borders."""
    height, width = canvas.shape
    y0, y1 = max(0, top), min(height, top + mask.shape[0])
    x0, x1 = max(0, left), min(width, left + mask.shape[1])
    if y0 >= y1 or x0 >= x1:
        return
    sub = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    canvas[y0:y1, x0:x1][sub] = tex[y0 - top:y1 - top, x0 - left:x1 - left][sub]
    label[y0:y1, x0:x1][sub] = cls


def make_clip(seed, frame_count, height=32, width=48, max_speed=2):
    """One clip: ((T, 1, H, W) lattice frames, (T, H, W) integer labels)."""
    rng = np.random.default_rng(seed)
    background = _smooth_background(rng, height, width)

    if rng.random() < 0.5:
        bar_h, bar_w = 4, 14
    else:
        bar_h, bar_w = 14, 4
    bar_tex = 0.62 + 0.12 * ((np.add.outer(np.arange(bar_h), np.arange(bar_w))) % 2)
    bar_tex += rng.uniform(-0.03, 0.03, size=bar_tex.shape)
    bar_y0, bar_vy = _plan_track(rng, height, bar_h, frame_count, max_speed)
    bar_x0, bar_vx = _plan_track(rng, width, bar_w, frame_count, max_speed)

    diameter = 11
    yy, xx = np.mgrid[:diameter, :diameter]
    disc_dist2 = (yy - 5) ** 2 + (xx - 5) ** 2
    disc_tex = 0.92 - 0.004 * disc_dist2
    disc_tex += rng.uniform(-0.02, 0.02, size=disc_tex.shape)
    # half the discs slide into view late in the clip; an entering object
    # exists in no earlier keyframe, which is exactly what motion
    # compensation alone cannot supply
    if max_speed > 0 and rng.random() < 0.5:
        if rng.random() < 0.5:
            disc_y0, disc_vy = _plan_entry(rng, height, diameter, frame_count)
            disc_x0, disc_vx = _plan_track(rng, width, diameter, frame_count, max_speed)
        else:
            disc_y0, disc_vy = _plan_track(rng, height, diameter, frame_count, max_speed)
            disc_x0, disc_vx = _plan_entry(rng, width, diameter, frame_count)
    else:
        disc_y0, disc_vy = _plan_track(rng, height, diameter, frame_count, max_speed)
        disc_x0, disc_vx = _plan_track(rng, width, diameter, frame_count, max_speed)
    breath_phase = rng.uniform(0, 2 * np.pi)
    lum_phase = rng.uniform(0, 2 * np.pi)

    frames = np.empty((frame_count, 1, height, width))
    labels = np.zeros((frame_count, height, width), dtype=np.int64)
    bar_mask = np.ones((bar_h, bar_w), dtype=bool)
    for t in range(frame_count):
        canvas = background + rng.uniform(-1.5, 1.5, size=background.shape) / LATTICE
        label = np.zeros((height, width), dtype=np.int64)

        _paste(canvas, label, bar_y0 + (t * bar_vy) // 2,
               bar_x0 + (t * bar_vx) // 2, bar_tex, bar_mask, 1)

        radius = 4.2 + 1.1 * np.sin(2 * np.pi * t / 13.0 + breath_phase)
        disc_mask = disc_dist2 <= radius * radius
        _paste(canvas, label, disc_y0 + (t * disc_vy) // 2,
               disc_x0 + (t * disc_vx) // 2, disc_tex, disc_mask, 2)

        # vertical gradient: a single per-channel gain cannot explain the
        # drift away, so stale warped features stay visibly stale
        ramp = 0.5 + np.arange(height)[:, None] / height
        luminance = 1.0 + 0.04 * np.sin(2 * np.pi * t / 17.0 + lum_phase) * ramp
        frames[t, 0] = _quantize(np.clip(canvas * luminance, 0.0, 1.0))
        labels[t] = label
    return frames, labels


def make_dataset(seed, clips, frame_count, height=32, width=48, max_speed=2):
    """A list of (frames, labels) clips with per-clip derived seeds."""
    return [make_clip(seed * 10_000 + i, frame_count, height, width, max_speed)
            for i in range(clips)]
