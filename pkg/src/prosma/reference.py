"""Naive loop implementations used as independent oracles.

These deliberately avoid every trick used by :mod:`prosma.ops` (no im2col,
no einsum, no interpolation matrices) so the two can be compared.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_naive(x, weight, bias=None, dilation=1, padding=0, groups=1):
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    oh = h + 2 * padding - dilation * (kh - 1)
    ow = w + 2 * padding - dilation * (kw - 1)
    cout_g = cout // groups
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            grp = o // cout_g
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(cin_g):
                        ci = grp * cin_g + c
                        for i in range(kh):
                            for j in range(kw):
                                sy = y - padding + i * dilation
                                sx = xx - padding + j * dilation
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += weight[o, c, i, j] * x[b, ci, sy, sx]
                    out[b, o, y, xx] = acc
    return out


def maxpool2_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for b in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[b, ch, y, xx] = max(
                        x[b, ch, 2 * y + dy, 2 * xx + dx] for dy in range(2) for dx in range(2)
                    )
    return out


def bilinear_up2_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))

    def coord(dst, size):
        s = min(max((dst + 0.5) / 2.0 - 0.5, 0.0), size - 1)
        lo = int(math.floor(s))
        return lo, min(lo + 1, size - 1), s - lo

    for i in range(2 * h):
        y0, y1, fy = coord(i, h)
        for j in range(2 * w):
            x0, x1, fx = coord(j, w)
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out


def gap_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            out[b, ch] = sum(x[b, ch].ravel().tolist()) / (h * w)
    return out


def soft_threshold_grid(u: float, lam: float, step: float = 1e-4) -> float:
    """Minimise ``0.5 (z - u)^2 + lam |z|`` over a uniform grid containing 0."""
    half = abs(u) + 1.0
    k = int(math.ceil(half / step))
    grid = np.arange(-k, k + 1) * step
    obj = 0.5 * (grid - u) ** 2 + lam * np.abs(grid)
    return float(grid[int(np.argmin(obj))])
