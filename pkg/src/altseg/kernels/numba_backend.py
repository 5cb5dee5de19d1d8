"""Numba-jitted twins of the kernels in :mod:`altseg.kernels.numpy_backend`.

Same signatures, same clamping and tie-break semantics. Convolutions use
im2col plus BLAS ``np.dot`` like the numpy backend; everything else is
straight loops. All functions are compiled lazily with ``cache=True`` so
repeated runs skip compilation. fastmath stays off: gradient checks rely
on strict IEEE order.
"""

import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True)
def _pad_input(x, pad):
    if pad == 0:
        return x
    cin, h, wd = x.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    return xp


@njit(cache=True)
def _im2col(xp, k, stride, ho, wo):
    # row layout (ci * k + ky) * k + kx, matching the numpy backend
    cg = xp.shape[0]
    cols = np.empty((cg * k * k, ho * wo))
    for ci in range(cg):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for oy in range(ho):
                    iy = oy * stride + ky
                    for ox in range(wo):
                        cols[row, oy * wo + ox] = xp[ci, iy, ox * stride + kx]
    return cols


@njit(cache=True)
def conv2d_forward(x, w, b, groups, stride, pad):
    cin, h, wd = x.shape
    cout, cgi, k, _ = w.shape
    cgo = cout // groups
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = _pad_input(x, pad)
    out = np.empty((cout, ho, wo))
    for gi in range(groups):
        cols = _im2col(xp[gi * cgi:(gi + 1) * cgi], k, stride, ho, wo)
        wg = np.ascontiguousarray(w[gi * cgo:(gi + 1) * cgo]).reshape(cgo, cgi * k * k)
        res = np.dot(wg, cols)
        for co in range(cgo):
            bias = b[gi * cgo + co]
            for oy in range(ho):
                for ox in range(wo):
                    out[gi * cgo + co, oy, ox] = res[co, oy * wo + ox] + bias
    return out


@njit(cache=True)
def conv2d_backward(x, w, groups, stride, pad, gy, need_gx):
    cin, h, wd = x.shape
    cout, cgi, k, _ = w.shape
    cgo = cout // groups
    ho, wo = gy.shape[1], gy.shape[2]
    xp = _pad_input(x, pad)
    gw = np.empty_like(w)
    gb = np.empty(cout)
    gxp = np.zeros_like(xp)
    for gi in range(groups):
        cols = _im2col(xp[gi * cgi:(gi + 1) * cgi], k, stride, ho, wo)
        gyg = np.ascontiguousarray(gy[gi * cgo:(gi + 1) * cgo]).reshape(cgo, ho * wo)
        gwg = np.dot(gyg, np.ascontiguousarray(cols.T))
        for co in range(cgo):
            gb[gi * cgo + co] = gyg[co].sum()
            for ci in range(cgi):
                for ky in range(k):
                    for kx in range(k):
                        gw[gi * cgo + co, ci, ky, kx] = gwg[co, (ci * k + ky) * k + kx]
        if need_gx:
            wg = np.ascontiguousarray(w[gi * cgo:(gi + 1) * cgo]).reshape(cgo, cgi * k * k)
            gcols = np.dot(np.ascontiguousarray(wg.T), gyg)
            base = gi * cgi
            for ci in range(cgi):
                for ky in range(k):
                    for kx in range(k):
                        row = (ci * k + ky) * k + kx
                        for oy in range(ho):
                            iy = oy * stride + ky
                            for ox in range(wo):
                                gxp[base + ci, iy, ox * stride + kx] += gcols[row, oy * wo + ox]
    if pad == 0:
        return gxp, gw, gb
    gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wd])
    return gx, gw, gb


@njit(cache=True)
def bilinear_forward(x, oh, ow):
    c, h, w = x.shape
    out = np.empty((c, oh, ow))
    sy = h / oh
    sx = w / ow
    for oy in range(oh):
        fy = (oy + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > h - 1.0:
            fy = h - 1.0
        y0 = int(np.floor(fy))
        ty = fy - y0
        y1 = min(y0 + 1, h - 1)
        for ox in range(ow):
            fx = (ox + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > w - 1.0:
                fx = w - 1.0
            x0 = int(np.floor(fx))
            tx = fx - x0
            x1 = min(x0 + 1, w - 1)
            for ci in range(c):
                a = x[ci, y0, x0]
                top = a + tx * (x[ci, y0, x1] - a)
                bb = x[ci, y1, x0]
                bot = bb + tx * (x[ci, y1, x1] - bb)
                out[ci, oy, ox] = top + ty * (bot - top)
    return out


@njit(cache=True)
def bilinear_backward(gy, ih, iw):
    c, oh, ow = gy.shape
    gx = np.zeros((c, ih, iw))
    sy = ih / oh
    sx = iw / ow
    for oy in range(oh):
        fy = (oy + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > ih - 1.0:
            fy = ih - 1.0
        y0 = int(np.floor(fy))
        ty = fy - y0
        y1 = min(y0 + 1, ih - 1)
        for ox in range(ow):
            fx = (ox + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > iw - 1.0:
                fx = iw - 1.0
            x0 = int(np.floor(fx))
            tx = fx - x0
            x1 = min(x0 + 1, iw - 1)
            for ci in range(c):
                g = gy[ci, oy, ox]
                gx[ci, y0, x0] += g * (1.0 - ty) * (1.0 - tx)
                gx[ci, y0, x1] += g * (1.0 - ty) * tx
                gx[ci, y1, x0] += g * ty * (1.0 - tx)
                gx[ci, y1, x1] += g * ty * tx
    return gx


@njit(cache=True)
def local_attn_forward(v, k, q, n, scale):
    c, h, w = v.shape
    half = n // 2
    nn = n * n
    out = np.empty((c, h, w))
    wts = np.empty((nn, h, w))
    scores = np.empty(nn)
    for y in range(h):
        for x in range(w):
            j = 0
            for dy in range(-half, half + 1):
                iy = min(max(y + dy, 0), h - 1)
                for dx in range(-half, half + 1):
                    ix = min(max(x + dx, 0), w - 1)
                    s = 0.0
                    for ci in range(c):
                        s += k[ci, iy, ix] * q[ci, y, x]
                    scores[j] = s * scale
                    j += 1
            m = scores[0]
            for j in range(1, nn):
                if scores[j] > m:
                    m = scores[j]
            tot = 0.0
            for j in range(nn):
                e = np.exp(scores[j] - m)
                scores[j] = e
                tot += e
            for j in range(nn):
                wts[j, y, x] = scores[j] / tot
            for ci in range(c):
                acc = 0.0
                j = 0
                for dy in range(-half, half + 1):
                    iy = min(max(y + dy, 0), h - 1)
                    for dx in range(-half, half + 1):
                        ix = min(max(x + dx, 0), w - 1)
                        acc += wts[j, y, x] * v[ci, iy, ix]
                        j += 1
                out[ci, y, x] = acc
    return out, wts


@njit(cache=True)
def local_attn_backward(v, k, q, n, scale, wts, gout):
    c, h, w = v.shape
    half = n // 2
    nn = n * n
    gv = np.zeros((c, h, w))
    gk = np.zeros((c, h, w))
    gq = np.zeros((c, h, w))
    dwts = np.empty(nn)
    for y in range(h):
        for x in range(w):
            j = 0
            for dy in range(-half, half + 1):
                iy = min(max(y + dy, 0), h - 1)
                for dx in range(-half, half + 1):
                    ix = min(max(x + dx, 0), w - 1)
                    d = 0.0
                    for ci in range(c):
                        gv[ci, iy, ix] += wts[j, y, x] * gout[ci, y, x]
                        d += gout[ci, y, x] * v[ci, iy, ix]
                    dwts[j] = d
                    j += 1
            dot = 0.0
            for j in range(nn):
                dot += wts[j, y, x] * dwts[j]
            j = 0
            for dy in range(-half, half + 1):
                iy = min(max(y + dy, 0), h - 1)
                for dx in range(-half, half + 1):
                    ix = min(max(x + dx, 0), w - 1)
                    ds = wts[j, y, x] * (dwts[j] - dot)
                    for ci in range(c):
                        gq[ci, y, x] += ds * k[ci, iy, ix] * scale
                        gk[ci, iy, ix] += ds * q[ci, y, x] * scale
                    j += 1
    return gv, gk, gq


@njit(cache=True)
def global_attn_forward(v, k, q, scale):
    c, p = v.shape
    _, h, w = q.shape
    out = np.empty((c, h, w))
    wts = np.empty((p, h, w))
    scores = np.empty(p)
    for y in range(h):
        for x in range(w):
            for j in range(p):
                s = 0.0
                for ci in range(c):
                    s += k[ci, j] * q[ci, y, x]
                scores[j] = s * scale
            m = scores[0]
            for j in range(1, p):
                if scores[j] > m:
                    m = scores[j]
            tot = 0.0
            for j in range(p):
                e = np.exp(scores[j] - m)
                scores[j] = e
                tot += e
            for j in range(p):
                wts[j, y, x] = scores[j] / tot
            for ci in range(c):
                acc = 0.0
                for j in range(p):
                    acc += wts[j, y, x] * v[ci, j]
                out[ci, y, x] = acc
    return out, wts


@njit(cache=True)
def global_attn_backward(v, k, q, scale, wts, gout):
    c, p = v.shape
    _, h, w = q.shape
    gv = np.zeros((c, p))
    gk = np.zeros((c, p))
    gq = np.zeros((c, h, w))
    dwts = np.empty(p)
    for y in range(h):
        for x in range(w):
            for j in range(p):
                d = 0.0
                for ci in range(c):
                    gv[ci, j] += wts[j, y, x] * gout[ci, y, x]
                    d += gout[ci, y, x] * v[ci, j]
                dwts[j] = d
            dot = 0.0
            for j in range(p):
                dot += wts[j, y, x] * dwts[j]
            for j in range(p):
                ds = wts[j, y, x] * (dwts[j] - dot)
                for ci in range(c):
                    gq[ci, y, x] += ds * k[ci, j] * scale
                    gk[ci, j] += ds * q[ci, y, x] * scale
    return gv, gk, gq


@njit(cache=True)
def sad_search(cur, ref, block, cand_dx, cand_dy):
    c, h, w = cur.shape
    bh, bw = h // block, w // block
    mv = np.zeros((2, bh, bw), dtype=np.int64)
    best = np.full((bh, bw), np.inf)
    for ci_cand in range(len(cand_dx)):
        dx = cand_dx[ci_cand]
        dy = cand_dy[ci_cand]
        for by in range(bh):
            for bx in range(bw):
                sad = 0.0
                for py in range(by * block, (by + 1) * block):
                    iy = min(max(py + dy, 0), h - 1)
                    for px in range(bx * block, (bx + 1) * block):
                        ix = min(max(px + dx, 0), w - 1)
                        for ci in range(c):
                            sad += abs(cur[ci, py, px] - ref[ci, iy, ix])
                if sad < best[by, bx]:
                    best[by, bx] = sad
                    mv[0, by, bx] = dx
                    mv[1, by, bx] = dy
    return mv
