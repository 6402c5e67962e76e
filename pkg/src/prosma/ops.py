"""Convolution, pooling and resampling operators with backward rules.

All spatial operators take ``[N, C, H, W]`` tensors.  Convolutions are
cross-correlations with zero padding and stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _node, add, as_tensor, log_kink, relu


@dataclass
class Conv2dParams:
    """Weights and geometry of one convolution layer."""

    weight: Tensor
    bias: Tensor | None = None
    dilation: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def same(cls, weight: Tensor, bias: Tensor | None = None, dilation: int = 1, groups: int = 1):
        k = weight.shape[-1]
        if k % 2 == 0:
            raise ShapeError(f"'same' convolution needs an odd kernel, got {k}")
        return cls(weight, bias, dilation, dilation * (k - 1) // 2, groups)


def _check_4d(x: Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be [N,C,H,W], got dims {x.dims}")


def _windows(xp: np.ndarray, kh: int, kw: int, d: int, oh: int, ow: int):
    """Yield (i, j, view) for every kernel tap over a padded input."""
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, :, i * d:i * d + oh, j * d:j * d + ow]


def _im2col(xp: np.ndarray, kh: int, kw: int, d: int, oh: int, ow: int) -> np.ndarray:
    """Patches as ``[N, C*kh*kw, oh*ow]`` (channel-major, then tap)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, oh, ow), dtype=xp.dtype)
    for i, j, view in _windows(xp, kh, kw, d, oh, ow):
        cols[:, :, i * kw + j] = view
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, params: Conv2dParams) -> Tensor:
    x = as_tensor(x)
    _check_4d(x)
    w, b = params.weight, params.bias
    d, p, groups = params.dilation, params.padding, params.groups
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be [C_out, C_in/groups, kH, kW], got {w.dims}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if d < 1 or p < 0 or groups < 1:
        raise ShapeError(f"invalid geometry dilation={d} padding={p} groups={groups}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(f"weight {w.dims} inconsistent with {cin} input channels and groups={groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias must be [{cout}], got {b.dims}")
    oh, ow = h + 2 * p - d * (kh - 1), wd + 2 * p - d * (kw - 1)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {d}) does not fit padded input {h}x{wd}")

    if groups == 1:
        return _conv_dense(x, w, b, d, p, oh, ow)
    if groups == cin == cout:
        return _conv_depthwise(x, w, b, d, p, oh, ow)
    return _conv_grouped(x, params)


def _conv_dense(x, w, b, d, p, oh, ow):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    one_by_one = kh == 1 and kw == 1 and p == 0
    if one_by_one:
        cols = x.data.reshape(n, cin, h * wd)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, kh, kw, d, oh, ow)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]

    def rule(g):
        gm = g.reshape(n, cout, oh * ow)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            if one_by_one:
                gx = gcols.reshape(n, cin, h, wd)
            else:
                gcols = gcols.reshape(n, cin, kh * kw, oh, ow)
                gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
                for i, j, view in _windows(gxp, kh, kw, d, oh, ow):
                    view += gcols[:, :, i * kw + j]
                gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(n, cout, oh, ow), parents, rule, "conv2d")


def _conv_depthwise(x, w, b, d, p, oh, ow):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, c, oh, ow))
    for i, j, view in _windows(xp, kh, kw, d, oh, ow):
        out += view * w.data[:, 0, i, j][None, :, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def rule(g):
        gw = np.zeros(w.shape) if w.requires_grad else None
        gxp = np.zeros(xp.shape) if x.requires_grad else None
        for i, j, view in _windows(xp, kh, kw, d, oh, ow):
            if gw is not None:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, view)
            if gxp is not None:
                gxp[:, :, i * d:i * d + oh, j * d:j * d + ow] += g * w.data[:, 0, i, j][None, :, None, None]
        gx = gxp[:, :, p:p + h, p:p + wd] if gxp is not None else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, rule, "depthwise_conv2d")


def _conv_grouped(x: Tensor, params: Conv2dParams) -> Tensor:
    groups = params.groups
    cin_g = x.shape[1] // groups
    cout_g = params.weight.shape[0] // groups
    outs = []
    for k in range(groups):
        xs = slice_channels(x, k * cin_g, (k + 1) * cin_g)
        ws = _slice0(params.weight, k * cout_g, (k + 1) * cout_g)
        bs = None if params.bias is None else _slice0(params.bias, k * cout_g, (k + 1) * cout_g)
        outs.append(conv2d(xs, Conv2dParams(ws, bs, params.dilation, params.padding, 1)))
    return concat_channels(*outs)


def _slice0(t: Tensor, lo: int, hi: int) -> Tensor:
    def rule(g):
        full = np.zeros(t.shape)
        full[lo:hi] = g
        return (full,)

    return _node(t.data[lo:hi].copy(), (t,), rule, "slice0")


def depthwise_dilated_conv(x: Tensor, kernel: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution with the given dilation; spatial size preserved."""
    x = as_tensor(x)
    _check_4d(x)
    c = x.shape[1]
    if kernel.ndim != 4 or kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise kernel must be [{c},1,k,k], got {kernel.dims}")
    return conv2d(x, Conv2dParams.same(kernel, bias, dilation=dilation, groups=c))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first index."""
    x = as_tensor(x)
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    log_kink(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _node(out, (x,), rule, "maxpool2")


def _up2_taps(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for doubling one axis (half-pixel centres)."""
    dst = np.arange(2 * size)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, src - lo


def _up2_matrix(size: int) -> np.ndarray:
    lo, hi, frac = _up2_taps(size)
    m = np.zeros((2 * size, size))
    rows = np.arange(2 * size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_up2(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation, half-pixel centres, edge clamping."""
    x = as_tensor(x)
    _check_4d(x)
    _, _, h, w = x.shape
    mh, mw = _up2_matrix(h), _up2_matrix(w)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def rule(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return _node(out, (x,), rule, "bilinear_up2")


def gap(x: Tensor) -> Tensor:
    """Global average pooling ``[N,C,H,W] -> [N,C]``."""
    x = as_tensor(x)
    _check_4d(x)
    n, c, h, w = x.shape

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), rule, "gap")


def concat_channels(*xs: Tensor) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    for t in xs:
        _check_4d(t)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {list(ref)} with {t.dims} along channels")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def rule(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return _node(np.concatenate([t.data for t in xs], axis=1), xs, rule, "concat")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)
    _check_4d(x)
    if not 0 <= lo < hi <= x.shape[1]:
        raise ShapeError(f"channel slice [{lo}:{hi}] out of range for {x.dims}")

    def rule(g):
        full = np.zeros(x.shape)
        full[:, lo:hi] = g
        return (full,)

    return _node(x.data[:, lo:hi].copy(), (x,), rule, "slice_channels")


@dataclass
class ResBlockParams:
    conv1: Conv2dParams
    conv2: Conv2dParams
    shortcut: Conv2dParams | None = None


def res_block(x: Tensor, params: ResBlockParams) -> Tensor:
    """``relu(conv3x3(relu(conv3x3(x))) + shortcut(x))``, no normalisation."""
    h = relu(conv2d(x, params.conv1))
    h = conv2d(h, params.conv2)
    skip = x if params.shortcut is None else conv2d(x, params.shortcut)
    if skip.shape != h.shape:
        raise ShapeError(f"residual branch {h.dims} does not match shortcut {skip.dims}")
    return relu(add(h, skip))
