"""Proximal-sparse skip gate.

The gate filters an encoder feature map ``x`` using decoder context ``g``:

1. project both into a latent space and form ``v = relu(Wx x + Wg g)``;
2. build a multi-scale compatibility field ``u`` by running one depthwise
   dilated 3x3 kernel per dilation over ``v`` and fusing the stack with a
   1x1 convolution;
3. sparsify ``u`` with the l1 proximal map (soft-thresholding) using a
   learnable per-channel threshold ``lambda = softplus(theta)``;
4. turn the sparse field into a single-channel spatial mask
   ``psi = sigmoid(Psi z)`` and compute a channel gate
   ``c = sigmoid(MLP(GAP(g)))``;
5. return ``x * c * psi``.

Ablation variants drop parts of step 4/5, or replace the whole pipeline with
a dense sigmoid attention mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, ShapeError
from .ops import Conv2dParams, concat_channels, conv2d, depthwise_dilated_conv, gap
from .tensor import Tensor, _node, add, as_tensor, log_kink, matmul, mul, relu, sigmoid, softplus, transpose

VARIANTS = ("full", "ss-only", "cg-only", "plain", "dense")

# parameter groups each variant actually uses
_USES = {
    "full": {"compat", "psi", "mlp"},
    "ss-only": {"compat", "psi"},
    "cg-only": {"mlp"},
    "plain": set(),
    "dense": {"proj", "psi"},
}


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ContractError(f"unknown gate variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return variant


def parts_used(variant: str) -> set[str]:
    """Names of parameter groups a variant needs ('proj' is implied by 'compat')."""
    uses = set(_USES[check_variant(variant)])
    if "compat" in uses:
        uses.add("proj")
    return uses


def gate_shapes(c_x: int, c_g: int, c_a: int, hidden: int, dilations, variant: str) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape for one gate, in canonical order."""
    uses = parts_used(variant)
    shapes: dict[str, tuple[int, ...]] = {}
    if "proj" in uses:
        shapes.update({
            "wx.weight": (c_a, c_x, 1, 1), "wx.bias": (c_a,),
            "wg.weight": (c_a, c_g, 1, 1), "wg.bias": (c_a,),
        })
    if "compat" in uses:
        for i, _ in enumerate(dilations):
            shapes[f"dw{i}.weight"] = (c_a, 1, 3, 3)
        shapes.update({
            "fuse.weight": (c_a, len(dilations) * c_a, 1, 1), "fuse.bias": (c_a,),
            "theta": (c_a,),
        })
    if "psi" in uses:
        shapes.update({"psi.weight": (1, c_a, 1, 1), "psi.bias": (1,)})
    if "mlp" in uses:
        shapes.update({
            "mlp.w1": (hidden, c_g), "mlp.b1": (hidden,),
            "mlp.w2": (c_x, hidden), "mlp.b2": (c_x,),
        })
    return shapes


@dataclass
class GateParams:
    """Learnable tensors of one gate; groups a variant does not use stay None."""

    wx: Conv2dParams | None = None
    wg: Conv2dParams | None = None
    dw: list[Tensor] = field(default_factory=list)
    dilations: tuple[int, ...] = (1, 2, 4)
    fuse: Conv2dParams | None = None
    theta: Tensor | None = None
    psi: Conv2dParams | None = None
    mlp_w1: Tensor | None = None
    mlp_b1: Tensor | None = None
    mlp_w2: Tensor | None = None
    mlp_b2: Tensor | None = None

    @classmethod
    def from_named(cls, named: Mapping[str, Tensor], prefix: str = "", dilations=(1, 2, 4)) -> GateParams:
        def get(name):
            return named.get(prefix + name)

        def conv(name):
            w = get(name + ".weight")
            return None if w is None else Conv2dParams(w, get(name + ".bias"))

        dw = [get(f"dw{i}.weight") for i in range(len(dilations))]
        return cls(
            wx=conv("wx"), wg=conv("wg"),
            dw=[k for k in dw if k is not None], dilations=tuple(dilations),
            fuse=conv("fuse"), theta=get("theta"), psi=conv("psi"),
            mlp_w1=get("mlp.w1"), mlp_b1=get("mlp.b1"), mlp_w2=get("mlp.w2"), mlp_b2=get("mlp.b2"),
        )

    def thresholds(self) -> Tensor:
        if self.theta is None:
            raise ContractError("this gate has no sparsity threshold")
        return softplus(self.theta)


@dataclass
class GateTrace:
    """Intermediates recorded by one gate evaluation.

    Fields a variant does not compute are None.  The plain variant reports
    all-ones ``psi_mask`` and ``channel_gate`` sentinels.
    """

    q: Tensor | None = None
    k: Tensor | None = None
    v: Tensor | None = None
    u: Tensor | None = None
    lam: Tensor | None = None
    z_star: Tensor | None = None
    psi_mask: Tensor | None = None
    channel_gate: Tensor | None = None
    zero_fraction_per_channel: np.ndarray | None = None
    output: Tensor | None = None


def soft_threshold(u: Tensor, lam) -> Tensor:
    """Per-channel l1 proximal map ``sign(u) * max(|u| - lam_c, 0)``.

    ``u`` has its channel axis at position 1 (usually ``[N, C, H, W]``) and
    ``lam`` is ``[C]``.  Entries with
    ``|u| <= lam_c`` come out as exact zeros.  At the kinks both partial
    derivatives are taken as 0.
    """
    u, lam = as_tensor(u), as_tensor(lam)
    if u.ndim < 2:
        raise ShapeError(f"soft_threshold expects a channel axis at position 1, got dims {u.dims}")
    c = u.shape[1]
    if lam.shape != (c,):
        raise ShapeError(f"threshold must have {c} entries, got dims {lam.dims}")
    if np.any(lam.data < 0):
        raise ContractError("soft_threshold needs non-negative thresholds")
    lam_b = lam.data.reshape((1, c) + (1,) * (u.ndim - 2))
    mag = np.abs(u.data) - lam_b
    active = mag > 0
    log_kink(active)
    sgn = np.sign(u.data)
    out = np.where(active, sgn * mag, 0.0)
    red = (0,) + tuple(range(2, u.ndim))

    def rule(g):
        gu = g * active if u.requires_grad else None
        gl = -(g * sgn * active).sum(axis=red) if lam.requires_grad else None
        return gu, gl

    return _node(out, (u, lam), rule, "soft_threshold")


def _need(obj, what: str):
    if obj is None:
        raise ContractError(f"gate parameters are missing {what}")
    return obj


def project(x: Tensor, g: Tensor, params: GateParams) -> tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"encoder {x.dims} and decoder {g.dims} features must share N, H, W")
    q = conv2d(x, _need(params.wx, "Wx"))
    k = conv2d(g, _need(params.wg, "Wg"))
    return q, k, relu(add(q, k))


def multiscale(v: Tensor, params: GateParams) -> Tensor:
    if not params.dw or len(params.dw) != len(params.dilations):
        raise ContractError("need one depthwise kernel per dilation")
    branches = [depthwise_dilated_conv(v, kern, d) for kern, d in zip(params.dw, params.dilations)]
    stacked = branches[0] if len(branches) == 1 else concat_channels(*branches)
    return conv2d(stacked, _need(params.fuse, "fusion conv"))


def compatibility_field(x: Tensor, g: Tensor, params: GateParams) -> tuple[Tensor, GateTrace]:
    q, k, v = project(x, g, params)
    u = multiscale(v, params)
    return u, GateTrace(q=q, k=k, v=v, u=u)


def spatial_mask(z_star: Tensor, params: GateParams) -> Tensor:
    return sigmoid(conv2d(z_star, _need(params.psi, "Psi projection")))


def channel_gate(g: Tensor, params: GateParams) -> Tensor:
    w1, b1 = _need(params.mlp_w1, "MLP w1"), _need(params.mlp_b1, "MLP b1")
    w2, b2 = _need(params.mlp_w2, "MLP w2"), _need(params.mlp_b2, "MLP b2")
    if w1.ndim != 2 or w1.shape[1] != g.shape[1] or w2.ndim != 2 or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"MLP weights {w1.dims}, {w2.dims} inconsistent with {g.shape[1]} decoder channels")
    pooled = gap(g)
    hidden = relu(add(matmul(pooled, transpose(w1)), b1))
    return sigmoid(add(matmul(hidden, transpose(w2)), b2))


def zero_fraction(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Share of entries per channel at or below the channel threshold."""
    below = np.abs(u) <= lam.reshape(1, -1, 1, 1)
    return below.mean(axis=(0, 2, 3))


def prosma_gate(x: Tensor, g: Tensor, params: GateParams, variant: str = "full") -> tuple[Tensor, GateTrace]:
    """Gate encoder features ``x`` with decoder context ``g``; returns (x_tilde, trace)."""
    check_variant(variant)
    x, g = as_tensor(x), as_tensor(g)
    n, c_x, h, w = x.shape
    if variant == "plain":
        out = x
        return out, GateTrace(
            psi_mask=Tensor(np.ones((n, 1, h, w))),
            channel_gate=Tensor(np.ones((n, c_x))),
            output=out,
        )
    if variant == "dense":
        q, k, v = project(x, g, params)
        psi = spatial_mask(v, params)
        out = mul(x, psi)
        return out, GateTrace(q=q, k=k, v=v, psi_mask=psi, output=out)

    trace = GateTrace()
    out = x
    if variant in ("full", "ss-only"):
        u, trace = compatibility_field(x, g, params)
        lam = params.thresholds()
        z = soft_threshold(u, lam)
        psi = spatial_mask(z, params)
        trace.lam, trace.z_star, trace.psi_mask = lam, z, psi
        trace.zero_fraction_per_channel = zero_fraction(u.data, lam.data)
        out = mul(out, psi)
    if variant in ("full", "cg-only"):
        c = channel_gate(g, params)
        trace.channel_gate = c
        out = mul(out, c)
    trace.output = out
    return out, trace
