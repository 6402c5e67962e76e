"""Five-level residual U-Net whose skip connections pass through the sparse gate."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ContractError, ShapeError
from .gate import GateParams, GateTrace, check_variant, gate_shapes, prosma_gate
from .ops import Conv2dParams, ResBlockParams, bilinear_up2, concat_channels, conv2d, maxpool2, res_block
from .tensor import Tensor


def softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


DEFAULT_THETA = softplus_inv(0.05)


@dataclass
class ModelConfig:
    in_channels: int = 1
    levels: int = 5
    base_channels: int = 16
    gate_variant: str = "full"
    dilations: tuple[int, ...] = (1, 2, 4)
    latent_min: int = 8
    mlp_reduction: int = 4
    mlp_min_hidden: int = 4
    theta_init: float = DEFAULT_THETA

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        check_variant(self.gate_variant)
        if self.levels < 2 or self.base_channels < 1 or self.in_channels < 1:
            raise ContractError(f"invalid model config {self}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ContractError(f"dilations must be positive, got {self.dilations}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    def latent_width(self, c_x: int) -> int:
        return max(c_x // 2, self.latent_min)

    def mlp_hidden(self, c_g: int) -> int:
        return max(c_g // self.mlp_reduction, self.mlp_min_hidden)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _res_shapes(prefix: str, c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.conv1.weight": (c_out, c_in, 3, 3), f"{prefix}.conv1.bias": (c_out,),
        f"{prefix}.conv2.weight": (c_out, c_out, 3, 3), f"{prefix}.conv2.bias": (c_out,),
    }
    if c_in != c_out:
        shapes[f"{prefix}.shortcut.weight"] = (c_out, c_in, 1, 1)
        shapes[f"{prefix}.shortcut.bias"] = (c_out,)
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape in canonical (forward) order."""
    ch = config.channels
    shapes: dict[str, tuple[int, ...]] = {}
    c_prev = config.in_channels
    for lvl, c in enumerate(ch, start=1):
        shapes.update(_res_shapes(f"e{lvl}", c_prev, c))
        c_prev = c
    shapes.update(_res_shapes("bottleneck", ch[-1], ch[-1]))
    for s in range(config.levels - 1, 0, -1):
        c_s, c_up = ch[s - 1], ch[s]
        shapes[f"up{s}.weight"] = (c_s, c_up, 3, 3)
        shapes[f"up{s}.bias"] = (c_s,)
        gate = gate_shapes(c_s, c_s, config.latent_width(c_s), config.mlp_hidden(c_s),
                           config.dilations, config.gate_variant)
        shapes.update({f"gate{s}.{k}": v for k, v in gate.items()})
        shapes.update(_res_shapes(f"d{s}", 2 * c_s, c_s))
    shapes["head.weight"] = (1, ch[0], 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


@dataclass
class ModelParams:
    """Named parameter map plus the config it was built for."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def conv(self, prefix: str) -> Conv2dParams:
        w = self.tensors[prefix + ".weight"]
        return Conv2dParams.same(w, self.tensors.get(prefix + ".bias"))

    def res(self, prefix: str) -> ResBlockParams:
        sc = prefix + ".shortcut"
        return ResBlockParams(
            self.conv(prefix + ".conv1"),
            self.conv(prefix + ".conv2"),
            self.conv(sc) if sc + ".weight" in self.tensors else None,
        )

    def gate(self, s: int) -> GateParams:
        return GateParams.from_named(self.tensors, f"gate{s}.", self.config.dilations)


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[1]


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # keyed per name so adding/removing gate tensors leaves every other init unchanged
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def init_tensors(shapes: dict[str, tuple[int, ...]], seed: int, theta_init: float = DEFAULT_THETA) -> dict[str, Tensor]:
    """He-uniform weights, zero biases, thresholds at ``theta_init``."""
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "theta":
            data = np.full(shape, theta_init)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / _fan_in(name, shape))
            data = _rng_for(seed, name).uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return tensors


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    return ModelParams(config, init_tensors(param_shapes(config), seed, config.theta_init))


def init_gate_params(c_x: int, c_g: int, seed: int, variant: str = "full", *, c_a: int | None = None,
                     hidden: int | None = None, dilations=(1, 2, 4),
                     theta_init: float = DEFAULT_THETA) -> GateParams:
    """Stand-alone gate with the same sizing rules and init as inside the model."""
    defaults = ModelConfig()
    c_a = c_a or defaults.latent_width(c_x)
    hidden = hidden or defaults.mlp_hidden(c_g)
    shapes = gate_shapes(c_x, c_g, c_a, hidden, dilations, variant)
    return GateParams.from_named(init_tensors(shapes, seed, theta_init), "", dilations)


def forward(params: ModelParams, image: Tensor) -> tuple[Tensor, list[GateTrace]]:
    """Return raw logits ``[N,1,H,W]`` and gate traces for stages 4..1."""
    cfg = params.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [N,{cfg.in_channels},H,W] input, got {image.dims}")
    h, w = image.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"input {h}x{w} is not divisible by {cfg.divisor}")

    skips = []
    feat = image
    for lvl in range(1, cfg.levels + 1):
        if lvl > 1:
            feat = maxpool2(feat)
        feat = res_block(feat, params.res(f"e{lvl}"))
        skips.append(feat)
    dec = res_block(feat, params.res("bottleneck"))

    traces = []
    for s in range(cfg.levels - 1, 0, -1):
        up = conv2d(bilinear_up2(dec), params.conv(f"up{s}"))
        gated, trace = prosma_gate(skips[s - 1], up, params.gate(s), cfg.gate_variant)
        traces.append(trace)
        dec = res_block(concat_channels(gated, up), params.res(f"d{s}"))
    logits = conv2d(dec, params.conv("head"))
    return logits, traces
