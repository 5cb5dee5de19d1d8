"""Spatial primitives recorded for reverse-mode gradients.

Each op validates shapes up front (errors name the offending dimension),
runs the forward pass through the active kernel backend, and registers a
backward closure on the output tensor. Feature maps are (C, H, W); motion
fields passed to :func:`warp` are fixed integer data and never receive
gradients.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .tensor import ShapeError, Tensor


def _require_chw(opname, t):
    if t.data.ndim != 3:
        raise ShapeError(f"{opname}: expected a (C, H, W) tensor, got shape {t.data.shape}")


def conv2d(x, w, b=None, stride=1, padding=None, groups=1):
    """2D convolution (cross-correlation) with zero padding.

    ``w`` is (C_out, C_in/groups, k, k) with odd k; ``padding`` defaults to
    k // 2 so stride-1 output matches the input extent.
    """
    _require_chw("conv2d", x)
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weights must be (C_out, C_in/g, k, k), got {w.data.shape}")
    cin, h, wd = x.data.shape
    cout, cgi, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {k} must be odd")
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(
            f"conv2d: groups {groups} must divide input channels {cin} "
            f"and output channels {cout}"
        )
    if cgi != cin // groups:
        raise ShapeError(
            f"conv2d: weight expects {cgi} input channels per group, "
            f"input supplies {cin // groups}"
        )
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} must be ({cout},)")
    if padding is None:
        padding = k // 2
    if stride < 1:
        raise ShapeError(f"conv2d: stride {stride} must be >= 1")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{wd + 2 * padding} "
            f"smaller than kernel {k}"
        )

    bias_arr = b.data if b is not None else np.zeros(cout)
    out = K.conv2d_forward(x.data, w.data, bias_arr, groups, stride, padding)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw, gb = K.conv2d_backward(
            x.data, w.data, groups, stride, padding, np.ascontiguousarray(g),
            x.requires_grad,
        )
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b is not None and b.requires_grad:
            b._accum(gb)

    return Tensor._from_op(out, parents, backward)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resample to (out_h, out_w) with half-pixel-center alignment.

    Resizing to the input extent is the identity; constant inputs stay
    exactly constant.
    """
    _require_chw("bilinear_resize", x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be >= 1")
    _, h, w = x.data.shape
    if (out_h, out_w) == (h, w):
        out = x.data.copy()
    else:
        out = K.bilinear_forward(x.data, out_h, out_w)

    def backward(g):
        if not x.requires_grad:
            return
        if (out_h, out_w) == (h, w):
            x._accum(g)
        else:
            x._accum(K.bilinear_backward(np.ascontiguousarray(g), h, w))

    return Tensor._from_op(out, (x,), backward)


def warp(feat, motion):
    """Gather features along integer per-pixel motion.

    ``motion`` is an int (2, H, W) array, channel 0 holding the x offset:
    out(:, y, x) = feat(:, y + dy, x + dx) with coordinates clamped to the
    frame. The motion field is fixed data; gradients flow to ``feat`` only.
    """
    _require_chw("warp", feat)
    motion = np.asarray(motion)
    c, h, w = feat.data.shape
    if motion.shape != (2, h, w):
        raise ShapeError(f"warp: motion shape {motion.shape} must be (2, {h}, {w})")
    if not np.issubdtype(motion.dtype, np.integer):
        raise ShapeError(f"warp: motion must be integer, got dtype {motion.dtype}")
    ys = np.clip(np.arange(h)[:, None] + motion[1], 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + motion[0], 0, w - 1)
    out = np.ascontiguousarray(feat.data[:, ys, xs])

    def backward(g):
        if not feat.requires_grad:
            return
        flat = (ys * w + xs).ravel()
        gf = np.empty((c, h, w))
        for ci in range(c):
            gf[ci] = np.bincount(flat, weights=g[ci].ravel(), minlength=h * w).reshape(h, w)
        feat._accum(gf)

    return Tensor._from_op(out, (feat,), backward)


def local_attention(value, key, query, neighborhood, scale):
    """Per-position attention over an n x n clamped spatial neighborhood.

    One softmax weight vector is computed per output position from
    key/query channel dot products and shared across all value channels.
    """
    for name, t in (("value", value), ("key", key), ("query", query)):
        _require_chw(f"local_attention {name}", t)
    if value.data.shape != key.data.shape or value.data.shape != query.data.shape:
        raise ShapeError(
            f"local_attention: value {value.data.shape}, key {key.data.shape} "
            f"and query {query.data.shape} must match"
        )
    n = int(neighborhood)
    if n < 1 or n % 2 == 0:
        raise ShapeError(f"local_attention: neighborhood {n} must be odd and >= 1")
    out, wts = K.local_attn_forward(value.data, key.data, query.data, n, float(scale))

    def backward(g):
        gv, gk, gq = K.local_attn_backward(
            value.data, key.data, query.data, n, float(scale), wts,
            np.ascontiguousarray(g),
        )
        if value.requires_grad:
            value._accum(gv)
        if key.requires_grad:
            key._accum(gk)
        if query.requires_grad:
            query._accum(gq)

    return Tensor._from_op(out, (value, key, query), backward)


def global_attention(value, key, query, scale):
    """Attention of every query position over pooled (C, P) value/key columns."""
    _require_chw("global_attention query", query)
    if value.data.ndim != 2 or key.data.ndim != 2:
        raise ShapeError(
            f"global_attention: value/key must be (C, P) columns, got "
            f"{value.data.shape} and {key.data.shape}"
        )
    if value.data.shape != key.data.shape:
        raise ShapeError(
            f"global_attention: value {value.data.shape} and key {key.data.shape} must match"
        )
    if value.data.shape[0] != query.data.shape[0]:
        raise ShapeError(
            f"global_attention: column channels {value.data.shape[0]} must match "
            f"query channels {query.data.shape[0]}"
        )
    out, wts = K.global_attn_forward(value.data, key.data, query.data, float(scale))

    def backward(g):
        gv, gk, gq = K.global_attn_backward(
            value.data, key.data, query.data, float(scale), wts,
            np.ascontiguousarray(g),
        )
        if value.requires_grad:
            value._accum(gv)
        if key.requires_grad:
            key._accum(gk)
        if query.requires_grad:
            query._accum(gq)

    return Tensor._from_op(out, (value, key, query), backward)


def avg_pool(x, factor):
    """Mean over factor x factor blocks; ragged edge blocks average the
    pixels they actually cover. Output is (C, ceil(H/f), ceil(W/f))."""
    _require_chw("avg_pool", x)
    f = int(factor)
    if f < 1:
        raise ShapeError(f"avg_pool: factor {f} must be >= 1")
    c, h, w = x.data.shape
    oh = -(-h // f)
    ow = -(-w // f)
    row_edges = np.arange(0, h, f)
    col_edges = np.arange(0, w, f)
    row_counts = np.minimum(row_edges + f, h) - row_edges
    col_counts = np.minimum(col_edges + f, w) - col_edges
    counts = row_counts[:, None] * col_counts[None, :]
    sums = np.add.reduceat(np.add.reduceat(x.data, row_edges, axis=1), col_edges, axis=2)
    out = sums / counts

    def backward(g):
        if not x.requires_grad:
            return
        per = g / counts
        gx = np.repeat(np.repeat(per, f, axis=1), f, axis=2)[:, :h, :w]
        x._accum(np.ascontiguousarray(gx))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def concat_channels(a, b):
    _require_chw("concat_channels", a)
    _require_chw("concat_channels", b)
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial extents {a.data.shape[1:]} and "
            f"{b.data.shape[1:]} differ"
        )
    ca = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        if a.requires_grad:
            a._accum(g[:ca])
        if b.requires_grad:
            b._accum(g[ca:])

    return Tensor._from_op(out, (a, b), backward)
