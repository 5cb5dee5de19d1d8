"""Toy block-motion video codec.

A clip is stored as groups of pictures: the frame at each multiple of the
GOP length is intra-coded (raw pixels); every following frame in the group
is predicted from that keyframe by per-block integer motion plus a
residual. Motion is found by exhaustive SAD search; prediction gathers
keyframe pixels at clamped offset coordinates, the same convention the
feature warp uses, so decoded motion can drive feature reuse directly.

With a positive quantization step the residual is rounded to multiples of
the step; with step 0 the stored residual is adjusted until the predictor
plus residual reproduces the source bit for bit.

Serialized layout (little-endian), magic ``ARSG``:

  u8 version (1), u16 width, u16 height, u16 gop, u8 block, u8 search,
  f64 quant_step, u8 channels, u32 frame_count, then per frame one u8 type
  tag: 0 = intra, followed by C*H*W f64 pixels; 1 = predicted, followed by
  bh*bw i8 (dx, dy) pairs and C*H*W f64 residuals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import sad_search
from .tensor import FileFormatError


class ClipFormatError(FileFormatError):
    """Raised when a serialized clip is malformed; messages carry the byte
    offset where validation failed."""


@dataclass
class MotionField:
    """Per-block integer displacements, channel 0 = dx, channel 1 = dy."""

    block_size: int
    vectors: np.ndarray  # int64 (2, bh, bw)

    def expand(self, h, w):
        """Replicate block vectors to a dense (2, h, w) field."""
        dense = np.repeat(np.repeat(self.vectors, self.block_size, axis=1),
                          self.block_size, axis=2)
        return np.ascontiguousarray(dense[:, :h, :w])


@dataclass
class IntraFrame:
    pixels: np.ndarray  # f64 (C, H, W)


@dataclass
class PredictedFrame:
    motion: MotionField
    residual: np.ndarray  # f64 (C, H, W)


@dataclass
class EncodedClip:
    width: int
    height: int
    channels: int
    gop: int
    block_size: int
    search_range: int
    quant_step: float
    frames: list = field(default_factory=list)


def candidate_offsets(search_range):
    """All (dx, dy) in the search square, ordered by (|dx| + |dy|, dy, dx).

    The zero vector comes first; the SAD search only replaces on a strict
    improvement, so this ordering is the deterministic tie-break.
    """
    offs = [(dx, dy)
            for dy in range(-search_range, search_range + 1)
            for dx in range(-search_range, search_range + 1)]
    offs.sort(key=lambda o: (abs(o[0]) + abs(o[1]), o[1], o[0]))
    return offs


def gather_frame(frame, dense_mv):
    """Sample frame pixels at clamped offset coordinates.

    out(:, y, x) = frame(:, y + dy, x + dx); this is the plain-array twin
    of the differentiable feature warp.
    """
    _, h, w = frame.shape
    ys = np.clip(np.arange(h)[:, None] + dense_mv[1], 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + dense_mv[0], 0, w - 1)
    return np.ascontiguousarray(frame[:, ys, xs])


def _pad_to_blocks(frame, block):
    _, h, w = frame.shape
    ph = (-h) % block
    pw = (-w) % block
    if ph or pw:
        frame = np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return np.ascontiguousarray(frame)


def estimate_motion(cur, ref, block_size, search_range):
    """Exhaustive block matching of ``cur`` against ``ref``.

    Frames are edge-replicated up to block multiples; the returned field
    covers the padded grid and :meth:`MotionField.expand` trims back.
    """
    if cur.shape != ref.shape:
        raise ValueError(f"estimate_motion: frame shapes {cur.shape} and {ref.shape} differ")
    offs = candidate_offsets(search_range)
    cand_dx = np.array([o[0] for o in offs], dtype=np.int64)
    cand_dy = np.array([o[1] for o in offs], dtype=np.int64)
    cur_p = _pad_to_blocks(np.ascontiguousarray(cur, dtype=np.float64), block_size)
    ref_p = _pad_to_blocks(np.ascontiguousarray(ref, dtype=np.float64), block_size)
    mv = sad_search(cur_p, ref_p, block_size, cand_dx, cand_dy)
    return MotionField(block_size=block_size, vectors=mv)


def _exact_residual(cur, pred):
    # cur - pred drops low bits of cur when exponents differ, so nudge the
    # residual until pred + residual reproduces cur exactly. Exactness is
    # guaranteed when frame values sit on a shared dyadic lattice (integer
    # pixels, or multiples of 2^-k with bounded magnitude); for arbitrary
    # floats some pixels are unreachable by any residual, because achievable
    # sums are spaced at the predictor's ulp, and those raise.
    res = cur - pred
    for _ in range(2):
        bad = (pred + res) != cur
        if not bad.any():
            return res
        res[bad] += cur[bad] - (pred[bad] + res[bad])
    for direction in (np.inf, -np.inf):
        bad = (pred + res) != cur
        if not bad.any():
            return res
        stepped = np.nextafter(res[bad], direction)
        take = (pred[bad] + stepped) == cur[bad]
        res[bad] = np.where(take, stepped, res[bad])
    if ((pred + res) != cur).any():
        raise FloatingPointError(
            "lossless residual is unreachable: predictor and source pixel "
            "magnitudes differ too much for an exact float sum"
        )
    return res


def encode_clip(frames, gop, block_size, search_range, quant_step=0.0):
    """Encode (T, C, H, W) frames into keyframe groups with block motion."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"encode_clip: frames must be (T, C, H, W), got {frames.shape}")
    t, c, h, w = frames.shape
    if gop < 1:
        raise ValueError(f"encode_clip: gop {gop} must be >= 1")
    if not 1 <= block_size <= 255:
        raise ValueError(f"encode_clip: block size {block_size} outside [1, 255]")
    if not 0 <= search_range <= 127:
        raise ValueError(f"encode_clip: search range {search_range} outside [0, 127]")
    if quant_step < 0:
        raise ValueError(f"encode_clip: quant step {quant_step} must be >= 0")
    clip = EncodedClip(width=w, height=h, channels=c, gop=gop,
                       block_size=block_size, search_range=search_range,
                       quant_step=float(quant_step))
    key = None
    for i in range(t):
        cur = frames[i]
        if i % gop == 0:
            clip.frames.append(IntraFrame(pixels=cur.copy()))
            key = cur.copy()
        else:
            mv = estimate_motion(cur, key, block_size, search_range)
            pred = gather_frame(key, mv.expand(h, w))
            if quant_step > 0:
                # np.round rounds half to even; the step is applied per value
                res = np.round((cur - pred) / quant_step) * quant_step
            else:
                res = _exact_residual(cur, pred)
            clip.frames.append(PredictedFrame(motion=mv, residual=res))
    return clip


def decode_clip(clip):
    """Reconstruct frames; returns ((T, C, H, W) array, per-frame motion).

    The motion list holds None for intra frames and the stored
    :class:`MotionField` for predicted frames.
    """
    t = len(clip.frames)
    out = np.empty((t, clip.channels, clip.height, clip.width))
    motions = []
    key = None
    for i, fr in enumerate(clip.frames):
        if isinstance(fr, IntraFrame):
            out[i] = fr.pixels
            key = out[i].copy()
            motions.append(None)
        else:
            pred = gather_frame(key, fr.motion.expand(clip.height, clip.width))
            out[i] = pred + fr.residual
            motions.append(fr.motion)
    return out, motions


_MAGIC = b"ARSG"
_VERSION = 1
_HEADER = struct.Struct("<4sBHHHBBdBI")


def save_clip(path, clip):
    bh = -(-clip.height // clip.block_size)
    bw = -(-clip.width // clip.block_size)
    parts = [_HEADER.pack(_MAGIC, _VERSION, clip.width, clip.height, clip.gop,
                          clip.block_size, clip.search_range, clip.quant_step,
                          clip.channels, len(clip.frames))]
    for fr in clip.frames:
        if isinstance(fr, IntraFrame):
            parts.append(b"\x00")
            parts.append(fr.pixels.astype("<f8").tobytes())
        else:
            parts.append(b"\x01")
            vec = fr.motion.vectors
            if np.abs(vec).max(initial=0) > 127:
                raise ValueError("motion component exceeds the i8 storage range")
            pairs = np.stack([vec[0], vec[1]], axis=-1).astype(np.int8)
            parts.append(pairs.tobytes())
            parts.append(fr.residual.astype("<f8").tobytes())
            if pairs.shape[:2] != (bh, bw):
                raise ValueError(f"motion grid {pairs.shape[:2]} does not match ({bh}, {bw})")
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, path):
        with open(path, "rb") as fh:
            self.blob = fh.read()
        self.path = path
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise ClipFormatError(
                f"{self.path}: truncated reading {what} at byte {self.off}"
            )
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk


def load_clip(path):
    rd = _Reader(path)
    head = rd.take(_HEADER.size, "header")
    magic, version, w, h, gop, block, search, quant, c, count = _HEADER.unpack(head)
    if magic != _MAGIC:
        raise ClipFormatError(f"{path}: bad magic {magic!r} at byte 0, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version} at byte 4")
    for name, val, pos in (("width", w, 5), ("height", h, 7), ("gop", gop, 9),
                           ("block size", block, 11), ("channels", c, 21)):
        if val < 1:
            raise ClipFormatError(f"{path}: {name} must be >= 1 at byte {pos}")
    if quant < 0 or not np.isfinite(quant):
        raise ClipFormatError(f"{path}: invalid quant step {quant} at byte 13")
    clip = EncodedClip(width=w, height=h, channels=c, gop=gop, block_size=block,
                       search_range=search, quant_step=quant)
    bh = -(-h // block)
    bw = -(-w // block)
    npix = c * h * w
    for i in range(count):
        tag_off = rd.off
        tag = rd.take(1, f"frame {i} type")[0]
        if tag == 0:
            raw = rd.take(8 * npix, f"frame {i} pixels")
            pix = np.frombuffer(raw, dtype="<f8").reshape(c, h, w)
            clip.frames.append(IntraFrame(pixels=pix.astype(np.float64)))
        elif tag == 1:
            if i % gop == 0:
                raise ClipFormatError(
                    f"{path}: frame {i} at a keyframe slot is predicted (byte {tag_off})"
                )
            raw = rd.take(2 * bh * bw, f"frame {i} motion")
            pairs = np.frombuffer(raw, dtype=np.int8).reshape(bh, bw, 2)
            vec = np.stack([pairs[:, :, 0], pairs[:, :, 1]]).astype(np.int64)
            raw = rd.take(8 * npix, f"frame {i} residual")
            res = np.frombuffer(raw, dtype="<f8").reshape(c, h, w)
            clip.frames.append(PredictedFrame(
                motion=MotionField(block_size=block, vectors=vec),
                residual=res.astype(np.float64)))
        else:
            raise ClipFormatError(
                f"{path}: unknown frame type {tag} at byte {tag_off}"
            )
    if clip.frames and not isinstance(clip.frames[0], IntraFrame):
        raise ClipFormatError(f"{path}: first frame is not intra (byte {_HEADER.size})")
    if rd.off != len(rd.blob):
        raise ClipFormatError(
            f"{path}: {len(rd.blob) - rd.off} trailing bytes at byte {rd.off}"
        )
    return clip
