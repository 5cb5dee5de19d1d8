"""Pure-numpy implementations of the hot numeric kernels.

Every function here has a numba twin in :mod:`altseg.kernels.numba_backend`
with identical signatures and semantics. Convolutions go through im2col and
BLAS; attention goes through fancy indexing and einsum. Summation order may
differ from the numba twin in the last ulp, so cross-backend comparisons
belong at ~1e-10 tolerance, not bit level.

Conventions shared by both backends:
  * arrays are C-contiguous float64
  * feature maps are (C, H, W), gradients match their primal shapes
  * local-attention neighborhood index j = (dy + n//2) * n + (dx + n//2)
  * out-of-bounds coordinates are clamped, never wrapped
"""

import numpy as np

BACKEND = "numpy"


def _im2col(xp, k, stride, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo))
    for ky in range(k):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            cols[:, ky, kx] = xp[:, ys, xs]
    return cols.reshape(c * k * k, ho * wo)


def conv2d_forward(x, w, b, groups, stride, pad):
    cin, h, wd = x.shape
    cout, cgi, k, _ = w.shape
    cgo = cout // groups
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((cout, ho, wo))
    for gi in range(groups):
        cols = _im2col(xp[gi * cgi:(gi + 1) * cgi], k, stride, ho, wo)
        wg = w[gi * cgo:(gi + 1) * cgo].reshape(cgo, -1)
        out[gi * cgo:(gi + 1) * cgo] = (wg @ cols).reshape(cgo, ho, wo)
    out += b[:, None, None]
    return out


def conv2d_backward(x, w, groups, stride, pad, gy, need_gx):
    cin, h, wd = x.shape
    cout, cgi, k, _ = w.shape
    cgo = cout // groups
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    gw = np.empty_like(w)
    gb = gy.sum(axis=(1, 2))
    # gx is always returned for signature parity with the numba twin; it is
    # all zeros when need_gx is false.
    gxp = np.zeros_like(xp)
    for gi in range(groups):
        cols = _im2col(xp[gi * cgi:(gi + 1) * cgi], k, stride, ho, wo)
        gyg = gy[gi * cgo:(gi + 1) * cgo].reshape(cgo, ho * wo)
        gw[gi * cgo:(gi + 1) * cgo] = (gyg @ cols.T).reshape(cgo, cgi, k, k)
        if need_gx:
            wg = w[gi * cgo:(gi + 1) * cgo].reshape(cgo, -1)
            gcols = (wg.T @ gyg).reshape(cgi, k, k, ho, wo)
            gslab = gxp[gi * cgi:(gi + 1) * cgi]
            for ky in range(k):
                ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
                for kx in range(k):
                    xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
                    gslab[:, ys, xs] += gcols[:, ky, kx]
    gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw, gb


def _resize_grid(n_in, n_out):
    # half-pixel-center mapping with a replicated border; the source
    # coordinate is clamped before splitting into index and fraction so
    # out-of-range samples take the edge value instead of a skewed blend
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    lo = np.floor(src).astype(np.int64)
    t = src - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, t


def bilinear_forward(x, oh, ow):
    c, h, w = x.shape
    y0, y1, ty = _resize_grid(h, oh)
    x0, x1, tx = _resize_grid(w, ow)
    # lerp as a + t*(b-a): exact for constant inputs and for t == 0
    a = x[:, y0[:, None], x0[None, :]]
    b = x[:, y0[:, None], x1[None, :]]
    cc = x[:, y1[:, None], x0[None, :]]
    d = x[:, y1[:, None], x1[None, :]]
    top = a + tx[None, None, :] * (b - a)
    bot = cc + tx[None, None, :] * (d - cc)
    return top + ty[None, :, None] * (bot - top)


def bilinear_backward(gy, ih, iw):
    c, oh, ow = gy.shape
    y0, y1, ty = _resize_grid(ih, oh)
    x0, x1, tx = _resize_grid(iw, ow)
    wy0 = (1.0 - ty)[:, None]
    wy1 = ty[:, None]
    wx0 = (1.0 - tx)[None, :]
    wx1 = tx[None, :]
    gx = np.zeros((c, ih, iw))
    flat00 = (y0[:, None] * iw + x0[None, :]).ravel()
    flat01 = (y0[:, None] * iw + x1[None, :]).ravel()
    flat10 = (y1[:, None] * iw + x0[None, :]).ravel()
    flat11 = (y1[:, None] * iw + x1[None, :]).ravel()
    for ci in range(c):
        g = gy[ci]
        acc = np.bincount(flat00, weights=(g * wy0 * wx0).ravel(), minlength=ih * iw)
        acc += np.bincount(flat01, weights=(g * wy0 * wx1).ravel(), minlength=ih * iw)
        acc += np.bincount(flat10, weights=(g * wy1 * wx0).ravel(), minlength=ih * iw)
        acc += np.bincount(flat11, weights=(g * wy1 * wx1).ravel(), minlength=ih * iw)
        gx[ci] = acc.reshape(ih, iw)
    return gx


def _nbhd_axes(h, w, n):
    half = n // 2
    offs = np.arange(-half, half + 1)
    dy = np.repeat(offs, n)
    dx = np.tile(offs, n)
    ys = np.clip(np.arange(h)[None, :] + dy[:, None], 0, h - 1)  # (n*n, h)
    xs = np.clip(np.arange(w)[None, :] + dx[:, None], 0, w - 1)  # (n*n, w)
    return ys, xs


def local_attn_forward(v, k, q, n, scale):
    c, h, w = v.shape
    ys, xs = _nbhd_axes(h, w, n)
    k_nb = k[:, ys[:, :, None], xs[:, None, :]]  # (c, n*n, h, w)
    scores = np.einsum("cnhw,chw->nhw", k_nb, q) * scale
    scores -= scores.max(axis=0)
    wts = np.exp(scores)
    wts /= wts.sum(axis=0)
    v_nb = v[:, ys[:, :, None], xs[:, None, :]]
    out = np.einsum("nhw,cnhw->chw", wts, v_nb)
    return np.ascontiguousarray(out), np.ascontiguousarray(wts)


def local_attn_backward(v, k, q, n, scale, wts, gout):
    c, h, w = v.shape
    ys, xs = _nbhd_axes(h, w, n)
    iy = np.broadcast_to(ys[:, :, None], (n * n, h, w))
    ix = np.broadcast_to(xs[:, None, :], (n * n, h, w))
    flat = (iy * w + ix).ravel()
    v_nb = v[:, ys[:, :, None], xs[:, None, :]]
    k_nb = k[:, ys[:, :, None], xs[:, None, :]]
    dwts = np.einsum("chw,cnhw->nhw", gout, v_nb)
    ds = wts * (dwts - (wts * dwts).sum(axis=0))
    gq = np.einsum("nhw,cnhw->chw", ds, k_nb) * scale
    gv = np.empty((c, h, w))
    gk = np.empty((c, h, w))
    for ci in range(c):
        gv_nb = (wts * gout[ci]).ravel()
        gk_nb = (ds * (q[ci] * scale)).ravel()
        gv[ci] = np.bincount(flat, weights=gv_nb, minlength=h * w).reshape(h, w)
        gk[ci] = np.bincount(flat, weights=gk_nb, minlength=h * w).reshape(h, w)
    return gv, gk, np.ascontiguousarray(gq)


def global_attn_forward(v, k, q, scale):
    # v, k are (c, p) pooled columns; q is (c, h, w)
    scores = np.einsum("cp,chw->phw", k, q) * scale
    scores -= scores.max(axis=0)
    wts = np.exp(scores)
    wts /= wts.sum(axis=0)
    out = np.einsum("phw,cp->chw", wts, v)
    return np.ascontiguousarray(out), np.ascontiguousarray(wts)


def global_attn_backward(v, k, q, scale, wts, gout):
    gv = np.einsum("phw,chw->cp", wts, gout)
    dwts = np.einsum("chw,cp->phw", gout, v)
    ds = wts * (dwts - (wts * dwts).sum(axis=0))
    gq = np.einsum("phw,cp->chw", ds, k) * scale
    gk = np.einsum("phw,chw->cp", ds, q) * scale
    return np.ascontiguousarray(gv), np.ascontiguousarray(gk), np.ascontiguousarray(gq)


def sad_search(cur, ref, block, cand_dx, cand_dy):
    """Full-search block matching over the given candidate displacements.

    Candidates are tried in order; a later candidate replaces the incumbent
    only on strictly smaller SAD, so the caller's ordering is the tie-break.
    Returns int64 vectors of shape (2, bh, bw) with channel 0 = dx.
    """
    c, h, w = cur.shape
    bh, bw = h // block, w // block
    best = np.full((bh, bw), np.inf)
    mv = np.zeros((2, bh, bw), dtype=np.int64)
    ys = np.arange(h)
    xs = np.arange(w)
    for dx, dy in zip(cand_dx, cand_dy):
        samp = ref[:, np.clip(ys + dy, 0, h - 1)[:, None], np.clip(xs + dx, 0, w - 1)[None, :]]
        sad = np.abs(cur - samp).sum(axis=0).reshape(bh, block, bw, block).sum(axis=(1, 3))
        better = sad < best
        best[better] = sad[better]
        mv[0][better] = dx
        mv[1][better] = dy
    return mv
