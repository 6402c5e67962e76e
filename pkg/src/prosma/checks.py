"""Registered gradient-check suites: every op, the composed gate, a tiny model.

Shared by the ``gradcheck`` subcommand and the test-suite so both exercise
exactly the same cases.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError
from .gate import VARIANTS, GateParams, compatibility_field, prosma_gate, soft_threshold
from .gradcheck import GradcheckResult, gradcheck, projected
from .model import ModelConfig, forward, init_gate_params, init_params, softplus_inv
from .ops import (Conv2dParams, ResBlockParams, bilinear_up2, concat_channels, conv2d,
                  depthwise_dilated_conv, gap, maxpool2, res_block, slice_channels)
from .tensor import Tensor
from .train import dice_bce_loss

OP_TOL = 1e-5
GATE_TOL = 1e-5
MODEL_TOL = 1e-4
KINK_BAND = 1e-4
SCOPES = ("ops", "gate", "model")


def _rng(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _leaf(rng, *dims, lo=None) -> Tensor:
    data = rng.standard_normal(dims)
    if lo is not None:
        data = np.abs(data) + lo
    return Tensor(data, requires_grad=True)


def _op_cases(rng_for) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def unary(fn, lo=None):
        def build():
            a = _leaf(rng_for(fn.__name__), 3, 4, lo=lo)
            return (lambda: fn(a)), [a]
        return build

    def binary(fn):
        def build():
            r = rng_for(fn.__name__)
            a, b = _leaf(r, 2, 3, 4, 4), _leaf(r, 3)
            b.data[:] = np.abs(b.data) + 0.5  # keeps div away from 0
            return (lambda: fn(a, b)), [a, b]
        return build

    def conv(groups, dilation, padding, bias=True):
        def build():
            r = rng_for(f"conv{groups}{dilation}{padding}")
            x = _leaf(r, 2, 4, 7, 6)
            w = _leaf(r, 6 if groups < 4 else 4, 4 // groups, 3, 3)
            b = _leaf(r, w.shape[0]) if bias else None
            params = Conv2dParams(w, b, dilation, padding, groups)
            return (lambda: conv2d(x, params)), [x, w] + ([b] if b else [])
        return build

    def depthwise():
        r = rng_for("depthwise")
        x, k = _leaf(r, 1, 3, 9, 9), _leaf(r, 3, 1, 3, 3)
        return (lambda: depthwise_dilated_conv(x, k, 2)), [x, k]

    def single(name, fn, *dims):
        def build():
            x = _leaf(rng_for(name), *dims)
            return (lambda: fn(x)), [x]
        return build

    def concat():
        r = rng_for("concat")
        a, b = _leaf(r, 2, 2, 3, 3), _leaf(r, 2, 3, 3, 3)
        return (lambda: concat_channels(a, b)), [a, b]

    def resblk():
        r = rng_for("res_block")
        x = _leaf(r, 1, 4, 6, 6)
        c1 = Conv2dParams.same(_leaf(r, 5, 4, 3, 3), _leaf(r, 5))
        c2 = Conv2dParams.same(_leaf(r, 5, 5, 3, 3), _leaf(r, 5))
        sc = Conv2dParams.same(_leaf(r, 5, 4, 1, 1), _leaf(r, 5))
        p = ResBlockParams(c1, c2, sc)
        return (lambda: res_block(x, p)), [x, c1.weight, c1.bias, c2.weight, c2.bias, sc.weight, sc.bias]

    def matmul():
        r = rng_for("matmul")
        a, b = _leaf(r, 3, 4), _leaf(r, 4, 2)
        return (lambda: T.matmul(a, b)), [a, b]

    def reductions():
        r = rng_for("reductions")
        a = _leaf(r, 2, 3, 4)
        return (lambda: T.add(T.tsum(a, (1, 2)), T.tsum(T.mean(a, 2), 1))), [a]

    def shape_ops():
        r = rng_for("shape_ops")
        a = _leaf(r, 6, 4)
        return (lambda: T.transpose(T.reshape(T.mean(T.reshape(a, [2, 3, 4]), 0), [3, 4]))), [a]

    def thresh():
        r = rng_for("soft_threshold")
        u = _leaf(r, 2, 3, 4, 4)
        theta = Tensor(np.full(3, softplus_inv(0.3)), requires_grad=True)
        return (lambda: soft_threshold(u, T.softplus(theta))), [u, theta]

    def loss():
        r = rng_for("loss")
        logits = _leaf(r, 2, 1, 4, 4)
        mask = (r.random((2, 1, 4, 4)) < 0.4).astype(float)
        return (lambda: dice_bce_loss(logits, mask)), [logits]

    return {
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul), "div": binary(T.div),
        "neg": unary(T.neg), "relu": unary(T.relu), "sigmoid": unary(T.sigmoid), "softplus": unary(T.softplus),
        "abs": unary(T.tabs), "exp": unary(T.exp), "log": unary(T.log, lo=0.5),
        "maximum": unary(lambda a: T.maximum(a, 0.1)),
        "sum_mean": reductions, "reshape_transpose": shape_ops, "matmul": matmul,
        "conv2d": conv(1, 1, 1), "conv2d_dilated": conv(1, 2, 2), "conv2d_valid": conv(1, 1, 0, bias=False),
        "conv2d_grouped": conv(2, 1, 1), "conv2d_depthwise": conv(4, 2, 2),
        "depthwise_dilated_conv": depthwise,
        "maxpool2": single("maxpool2", maxpool2, 2, 3, 6, 4),
        "bilinear_up2": single("bilinear_up2", bilinear_up2, 2, 2, 3, 5),
        "gap": single("gap", gap, 2, 3, 4, 5),
        "slice_channels": single("slice_channels", lambda x: slice_channels(x, 1, 3), 1, 4, 3, 3),
        "concat_channels": concat, "res_block": resblk, "soft_threshold": thresh, "dice_bce_loss": loss,
    }


def check_ops(seed: int = 0) -> list[GradcheckResult]:
    results = []
    for name, build in _op_cases(lambda n: _rng(n, seed)).items():
        fn, inputs = build()
        res = gradcheck(projected(fn, seed), inputs, name=name)
        results.append(res)
    return results


def gate_leaves(p: GateParams) -> list[Tensor]:
    out = []
    for conv in (p.wx, p.wg, p.fuse, p.psi):
        if conv is not None:
            out.append(conv.weight)
            if conv.bias is not None:
                out.append(conv.bias)
    out.extend(p.dw)
    out.extend(t for t in (p.theta, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2) if t is not None)
    return out


def _near_kink(x: Tensor, g: Tensor, p: GateParams) -> bool:
    with T.no_grad():
        u, _ = compatibility_field(x, g, p)
        lam = p.thresholds().data.reshape(1, -1, 1, 1)
    return bool(np.min(np.abs(np.abs(u.data) - lam)) <= KINK_BAND)


def check_gate(seed: int = 0, trials: int = 2, max_draws: int = 50) -> list[GradcheckResult]:
    """``trials`` kink-free draws per variant; draws within the band are skipped and counted."""
    results = []
    for variant in VARIANTS:
        rng = _rng("gate-" + variant, seed)
        worst, checked, skipped, done = 0.0, 0, 0, 0
        for draw in range(max_draws):
            x = Tensor(rng.standard_normal((1, 8, 5, 5)), requires_grad=True)
            g = Tensor(rng.standard_normal((1, 8, 5, 5)), requires_grad=True)
            p = init_gate_params(8, 8, seed * 1000 + draw, variant, theta_init=softplus_inv(0.3))
            if variant in ("full", "ss-only") and _near_kink(x, g, p):
                skipped += 1
                continue
            res = gradcheck(projected(lambda: prosma_gate(x, g, p, variant)[0], seed), [x, g] + gate_leaves(p))
            worst, checked = max(worst, res.max_rel_err), checked + res.checked
            skipped += res.skipped
            done += 1
            if done == trials:
                break
        if done < trials:
            raise ContractError(f"could not find {trials} kink-free draws for gate variant {variant}")
        results.append(GradcheckResult(f"gate[{variant}]", worst, checked, skipped))
    return results


def check_model(seed: int = 0, entries_per_tensor: int = 3) -> list[GradcheckResult]:
    """Tiny full model (base 4, 16x16) through the training loss, sampled coordinates."""
    cfg = ModelConfig(base_channels=4, theta_init=softplus_inv(0.02))
    params = init_params(cfg, seed)
    rng = _rng("model", seed)
    image = Tensor(rng.random((1, 1, 16, 16)))
    mask = (rng.random((1, 1, 16, 16)) < 0.3).astype(float)
    fn = lambda: dice_bce_loss(forward(params, image)[0], mask)  # noqa: E731
    leaves = list(params.values())
    # sampled per tensor so every parameter group is represented
    res = gradcheck(fn, leaves, name="model[tiny]", max_entries=entries_per_tensor, rng=rng)
    return [res]


def run_scope(scope: str, seed: int = 0) -> tuple[list[GradcheckResult], float]:
    """Results plus the tolerance that applies to them."""
    if scope == "ops":
        return check_ops(seed), OP_TOL
    if scope == "gate":
        return check_gate(seed), GATE_TOL
    if scope == "model":
        return check_model(seed), MODEL_TOL
    raise ContractError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES} or 'all'")
