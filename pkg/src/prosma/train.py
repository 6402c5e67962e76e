"""Loss, metrics, Adam, the training loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import ContractError, FormatError
from .model import ModelConfig, ModelParams, forward, init_params, param_shapes
from .tensor import Tensor, add, mean, mul, no_grad, sigmoid, softplus, sub, tsum

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSMA"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")


# -- loss --------------------------------------------------------------------


def dice_bce_loss(logits: Tensor, mask, bce_weight: float = 0.5, dice_weight: float = 0.5) -> Tensor:
    """``bce_weight * BCE-with-logits + dice_weight * (1 - soft Dice)``.

    BCE is averaged over every pixel; the soft Dice term (smoothing 1) is
    computed per image and averaged over the batch.
    """
    y = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("mask must be binary")
    if y.shape != logits.shape:
        raise ContractError(f"mask dims {list(y.shape)} differ from logits {logits.dims}")
    yt = Tensor(y)
    # softplus(x) - x*y == -[y log p + (1-y) log(1-p)], finite for any finite x
    bce = mean(sub(softplus(logits), mul(logits, yt)))
    p = sigmoid(logits)
    axes = tuple(range(1, logits.ndim))
    inter = tsum(mul(p, yt), axes)
    denom = add(tsum(p, axes), Tensor(y.sum(axis=axes) + 1.0))
    dice = mean(sub(1.0, (2.0 * inter + 1.0) / denom))
    return add(mul(bce, bce_weight), mul(dice, dice_weight))


# -- metrics -------------------------------------------------------------------


@dataclass
class MetricsReport:
    mean_iou: float
    mean_f1: float
    per_image: list[dict]
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {"mean_iou": self.mean_iou, "mean_f1": self.mean_f1,
                "per_image": self.per_image, "threshold": self.threshold}


def confusion_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def compute_metrics(prob: np.ndarray, mask: np.ndarray, threshold: float = 0.5,
                    ids: list[str] | None = None) -> MetricsReport:
    prob = np.asarray(prob)
    mask = np.asarray(mask)
    ids = ids or [str(i) for i in range(len(prob))]
    rows = []
    for sid, p, m in zip(ids, prob, mask):
        iou, f1 = confusion_scores(p >= threshold, m > 0.5)
        rows.append({"id": sid, "iou": iou, "f1": f1})
    if not rows:
        return MetricsReport(0.0, 0.0, [], threshold)
    return MetricsReport(
        float(np.mean([r["iou"] for r in rows])),
        float(np.mean([r["f1"] for r in rows])),
        rows, threshold,
    )


# -- optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams | dict[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place; tensors without a grad are skipped."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for name, p in tensors.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has dims {list(g.shape)}, parameter {p.dims}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ContractError(f"optimizer state for {name} does not match parameter dims")
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# -- loops ---------------------------------------------------------------------


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            logits, _ = forward(params, Tensor(images[lo:lo + batch_size]))
            out.append(sigmoid(logits).data)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])


def evaluate(params: ModelParams, dataset: Dataset, split: str = "test", threshold: float = 0.5) -> MetricsReport:
    ids, images, masks = dataset.arrays(split)
    if not ids:
        raise ContractError(f"split {split!r} is empty")
    return compute_metrics(predict(params, images), masks, threshold, ids)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    losses: list[float]
    val_history: list[MetricsReport]

    def history_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "loss": self.losses,
            "val_mean_f1": [r.mean_f1 for r in self.val_history],
            "val_mean_iou": [r.mean_iou for r in self.val_history],
        }


def _snapshot(params: ModelParams) -> ModelParams:
    return ModelParams(params.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()})


def train(
    model: ModelConfig | ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    *,
    validate: bool = True,
    on_epoch: Callable[[int, float, MetricsReport | None], None] | None = None,
) -> TrainResult:
    """Train with seeded shuffling; keep the parameters with the best val F1.

    With ``validate=False`` no validation pass runs and the final parameters
    are returned.
    """
    config.validate()
    params = model if isinstance(model, ModelParams) else init_params(model, config.seed)
    ids, images, masks = dataset.arrays("train")
    if not ids:
        raise ContractError("training split is empty")
    if validate and not dataset.splits.get("val"):
        raise ContractError("validation split is empty")

    rng = np.random.default_rng([int(config.seed), 0xADA])
    state = AdamState()
    losses: list[float] = []
    history: list[MetricsReport] = []
    best, best_f1, best_epoch = params, -1.0, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = np.sort(order[lo:lo + config.batch_size])
            params.zero_grad()
            logits, _ = forward(params, Tensor(images[idx]))
            loss = dice_bce_loss(logits, masks[idx], config.bce_weight, config.dice_weight)
            loss.backward()
            adam_step(params, state, config)
            total += loss.item() * len(idx)
        losses.append(total / len(ids))
        report = None
        if validate:
            report = evaluate(params, dataset, "val")
            history.append(report)
            if report.mean_f1 > best_f1:
                best_f1, best_epoch, best = report.mean_f1, epoch, _snapshot(params)
        log.info("epoch %d loss %.5f%s", epoch + 1, losses[-1],
                 f" val_f1 {report.mean_f1:.4f}" if report else "")
        if on_epoch:
            on_epoch(epoch, losses[-1], report)
    if not validate:
        best, best_epoch = params, config.epochs - 1
    return TrainResult(best, best_epoch, losses, history)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    """Binary, little-endian: magic, version, config JSON, then named float64 tensors.

    Values carry no checksum; corruption is detected only when it breaks the
    structure.
    """
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(params.tensors))]
    for name, t in params.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32("config length"), "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint config is malformed: {exc}") from None
    expected = param_shapes(cfg)
    count = r.u32("parameter count")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode(errors="replace")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8").astype(np.float64)
        tensors[name] = Tensor(values.reshape(dims), requires_grad=True)
    if r.pos != len(r.buf):
        raise FormatError(f"trailing bytes after checkpoint payload at byte offset {r.pos}")
    shapes = {k: tuple(v.shape) for k, v in tensors.items()}
    if shapes != expected:
        raise FormatError("checkpoint tensors do not match the architecture in its config")
    return ModelParams(cfg, tensors)


def write_json(path: str | os.PathLike, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
