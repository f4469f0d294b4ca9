"""Fused numba kernel for batched central-flow regression.

Computes the same quantities as the numpy path in :mod:`kprefine.align`
(bilinear sampling, 3x3 descriptors, ReLU + channel-normalized correlation,
window aggregation, equiangular peak fit) without materializing the volume.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _bilinear(pix, x, y):
    h, w = pix.shape
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = min(int(np.floor(x)), max(w - 2, 0))
    y0 = min(int(np.floor(y)), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = pix[y0, x0] * (1 - fx) + pix[y0, x1] * fx
    bottom = pix[y1, x0] * (1 - fx) + pix[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


@njit(cache=True)
def _sample(pix, cx, cy, scale, size, out):
    r = (size - 1) / 2
    for i in range(size):
        y = cy + scale * (i - r)
        for j in range(size):
            out[i + 1, j + 1] = _bilinear(pix, cx + scale * (j - r), y)
    # edge replicate into the one-sample border
    for i in range(1, size + 1):
        out[i, 0] = out[i, 1]
        out[i, size + 1] = out[i, size]
    for j in range(size + 2):
        out[0, j] = out[1, j]
        out[size + 1, j] = out[size, j]


@njit(cache=True)
def _describe(padded, g, stride, lo, hi, out):
    """Descriptors for grid rows/cols in [lo, hi); ``out`` is ``(n, n, 9)``."""
    amax = 0.0
    for v in padded.ravel():
        if abs(v) > amax:
            amax = abs(v)
    tol = 1e-6 * max(1.0, amax)
    for a in range(lo, hi):
        ci = 1 + stride * a
        for b in range(lo, hi):
            cj = 1 + stride * b
            mean = 0.0
            k = 0
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    out[a - lo, b - lo, k] = padded[ci + di, cj + dj]
                    mean += padded[ci + di, cj + dj]
                    k += 1
            mean /= 9.0
            sq = 0.0
            for k in range(9):
                out[a - lo, b - lo, k] -= mean
                sq += out[a - lo, b - lo, k] ** 2
            norm = np.sqrt(sq)
            for k in range(9):
                if norm <= tol:
                    out[a - lo, b - lo, k] = 0.0
                else:
                    out[a - lo, b - lo, k] /= norm


@njit(cache=True)
def _fit(lo, mid, hi):
    # equiangular (V-shaped) peak: normalized correlation peaks are cone-like
    m = min(lo, hi)
    if mid <= m:
        return 0.0
    s = 0.5 * (hi - lo) / (mid - m)
    return min(0.5, max(-0.5, s))


@njit(cache=True, nogil=True)
def central_flows(pix_u, pix_v, cu, cv, scale, size, g, radius, flows, low):
    stride = (size - 1) // (g - 1) if g > 1 else 1
    cell = stride * scale
    c = g // 2
    lo = max(0, c - radius)
    hi = min(g, c + radius + 1)
    n = hi - lo
    pu = np.empty((size + 2, size + 2))
    pv = np.empty((size + 2, size + 2))
    du = np.empty((n, n, 9))
    dv = np.empty((g, g, 9))
    gg = g * g
    m = np.empty(gg)
    dvt = np.empty((9, gg))
    total = np.empty((g, g))
    count = np.zeros((g, g))
    for i in range(lo, hi):
        for j in range(lo, hi):
            for p in range(max(0, c - i), min(g, g + c - i)):
                for q in range(max(0, c - j), min(g, g + c - j)):
                    count[p, q] += 1.0
    for e in range(cu.shape[0]):
        _sample(pix_u, cu[e, 0], cu[e, 1], scale, size, pu)
        _sample(pix_v, cv[e, 0], cv[e, 1], scale, size, pv)
        _describe(pu, g, stride, lo, hi, du)
        _describe(pv, g, stride, 0, g, dv)
        for ti in range(g):
            for tj in range(g):
                for k in range(9):
                    dvt[k, ti * g + tj] = dv[ti, tj, k]
        total[:, :] = 0.0
        for i in range(n):
            for j in range(n):
                m[:] = 0.0
                for k in range(9):
                    a = du[i, j, k]
                    for t in range(gg):
                        m[t] += a * dvt[k, t]
                sq = 0.0
                for t in range(gg):
                    if m[t] < 0.0:
                        m[t] = 0.0
                    sq += m[t] * m[t]
                if sq <= 0.0:
                    continue
                inv = 1.0 / np.sqrt(sq)
                di = i + lo - c
                dj = j + lo - c
                for p in range(max(0, -di), min(g, g - di)):
                    row = (p + di) * g + dj
                    for q in range(max(0, -dj), min(g, g - dj)):
                        total[p, q] += m[row + q] * inv
        best = -1.0
        bi = 0
        bj = 0
        for p in range(g):
            for q in range(g):
                total[p, q] /= count[p, q]
                if total[p, q] > best:
                    best = total[p, q]
                    bi = p
                    bj = q
        if best <= 0.0:
            flows[e, 0] = 0.0
            flows[e, 1] = 0.0
            low[e] = True
            continue
        # fit each axis on the profile summed over the three neighboring lines
        sx = 0.0
        sy = 0.0
        if 0 < bj < g - 1:
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for p in range(max(0, bi - 1), min(g, bi + 2)):
                a0 += total[p, bj - 1]
                a1 += total[p, bj]
                a2 += total[p, bj + 1]
            sx = _fit(a0, a1, a2)
        if 0 < bi < g - 1:
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for q in range(max(0, bj - 1), min(g, bj + 2)):
                a0 += total[bi - 1, q]
                a1 += total[bi, q]
                a2 += total[bi + 1, q]
            sy = _fit(a0, a1, a2)
        flows[e, 0] = (bj - c + sx) * cell
        flows[e, 1] = (bi - c + sy) * cell
        low[e] = False
