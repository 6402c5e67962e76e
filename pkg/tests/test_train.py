import math
import struct

import numpy as np
import pytest

from prosma.data import Dataset, Sample, SynthConfig, generate
from prosma.errors import ContractError, FormatError
from prosma.model import ModelConfig, init_params
from prosma.tensor import Tensor
from prosma.train import (AdamState, TrainConfig, adam_step, compute_metrics, dice_bce_loss, evaluate,
                          load_checkpoint, save_checkpoint, train)


def _loss(logits, mask):
    return dice_bce_loss(Tensor(np.asarray(logits, dtype=float)), np.asarray(mask, dtype=float)).item()


def test_saturated_correct_prediction():
    assert _loss(np.full((1, 1, 4, 4), 20.0), np.ones((1, 1, 4, 4))) < 1e-6


def test_zero_logits_bce_is_ln2():
    logits = Tensor(np.zeros((2, 1, 3, 3)))
    mask = np.zeros((2, 1, 3, 3))
    mask[0, 0, 0, 0] = 1
    only_bce = dice_bce_loss(logits, mask, bce_weight=1.0, dice_weight=0.0).item()
    assert only_bce == pytest.approx(math.log(2), rel=1e-14)


def test_dice_term_vanishes_when_probabilities_equal_mask():
    # p = y exactly: use logits so saturated that sigmoid rounds to 0/1 in float64
    y = (np.random.default_rng(0).random((2, 1, 4, 4)) < 0.5).astype(float)
    y[:, 0, 0, 0] = 1
    logits = Tensor(np.where(y > 0, 800.0, -800.0))
    dice_only = dice_bce_loss(logits, y, bce_weight=0.0, dice_weight=1.0).item()
    assert dice_only == 0.0


def test_dice_matches_hand_computation():
    logits = np.array([[[[0.3, -1.2], [2.0, 0.0]]]])
    y = np.array([[[[1.0, 0.0], [1.0, 0.0]]]])
    p = 1 / (1 + np.exp(-logits))
    dice = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    bce = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
    assert _loss(logits, y) == pytest.approx(0.5 * bce + 0.5 * dice, rel=1e-12)


@pytest.mark.parametrize("value", [1e4, -1e4])
def test_loss_finite_at_extreme_logits(value):
    logits = Tensor(np.full((1, 1, 2, 2), value), requires_grad=True)
    loss = dice_bce_loss(logits, np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    loss.backward()
    assert math.isfinite(loss.item()) and np.all(np.isfinite(logits.grad))


def test_loss_rejects_non_binary_mask():
    with pytest.raises(ContractError):
        _loss(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.5))


def test_metrics_examples():
    m = np.zeros((3, 1, 2, 4))
    m[:, 0, 0, :] = 1
    p = np.zeros_like(m)
    p[0] = m[0]                      # perfect
    p[1, 0, 1, :] = 1                # disjoint
    p[2, 0, 0, :2] = 1               # half the mask, no FP
    rep = compute_metrics(p, m, ids=["a", "b", "c"])
    assert [(r["iou"], r["f1"]) for r in rep.per_image] == [(1.0, 1.0), (0.0, 0.0), (0.5, 2 / 3)]
    assert rep.to_json().keys() == {"mean_iou", "mean_f1", "per_image", "threshold"}
    assert rep.per_image[0].keys() == {"id", "iou", "f1"}


def test_empty_prediction_and_mask_score_one():
    rep = compute_metrics(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3)))
    assert rep.mean_iou == rep.mean_f1 == 1.0


def test_f1_iou_identity_on_random_predictions():
    rng = np.random.default_rng(1)
    rep = compute_metrics(rng.random((50, 1, 8, 8)), (rng.random((50, 1, 8, 8)) < 0.3).astype(float))
    for r in rep.per_image:
        assert 0 <= r["iou"] <= r["f1"] <= 1
        assert r["f1"] == pytest.approx(2 * r["iou"] / (1 + r["iou"]), rel=1e-12)


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState(), TrainConfig())
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude_is_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
    p["w"].grad = np.array([3.0, -1e-3, 1e3])
    adam_step(p, AdamState(), TrainConfig(lr=0.01))
    np.testing.assert_allclose(p["w"].data - np.array([1.0, -2.0, 0.5]), [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(2)
    cfg = TrainConfig(lr=0.05)
    w = rng.standard_normal(4)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    state, m, v = AdamState(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p["w"].grad = g
        adam_step(p, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-13)


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    with pytest.raises(ContractError):
        adam_step(p, AdamState(), TrainConfig())


@pytest.mark.parametrize("bad", [dict(lr=0), dict(lr=-1), dict(batch_size=0), dict(epochs=0)])
def test_train_config_validation(bad):
    with pytest.raises(ContractError):
        TrainConfig(**bad).validate()


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SynthConfig(size=16, count=20, seed=1))


def test_train_history_and_determinism(tiny_data, tmp_path):
    cfg = ModelConfig(base_channels=2)
    tc = TrainConfig(epochs=3, seed=4)
    a, b = train(cfg, tiny_data, tc), train(cfg, tiny_data, tc)
    assert len(a.losses) == 3 and len(a.val_history) == 3
    assert a.losses == b.losses
    save_checkpoint(tmp_path / "a.ckpt", a.params)
    save_checkpoint(tmp_path / "b.ckpt", b.params)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    best = max(range(3), key=lambda i: (a.val_history[i].mean_f1, -i))
    assert a.best_epoch == best
    assert evaluate(a.params, tiny_data, "val").mean_f1 == a.val_history[best].mean_f1


def test_train_without_validation_returns_final(tiny_data):
    res = train(ModelConfig(base_channels=2), tiny_data, TrainConfig(epochs=2), validate=False)
    assert res.val_history == [] and res.best_epoch == 1


def test_train_rejects_empty_splits(tiny_data):
    empty_val = Dataset(tiny_data.samples, {**tiny_data.splits, "val": []})
    with pytest.raises(ContractError):
        train(ModelConfig(base_channels=2), empty_val, TrainConfig(epochs=1))
    no_train = Dataset(tiny_data.samples, {**tiny_data.splits, "train": []})
    with pytest.raises(ContractError):
        train(ModelConfig(base_channels=2), no_train, TrainConfig(epochs=1))


def test_plain_training_matches_reference_loss_curve(tiny_data):
    # a full model whose gates are forced open by giving it the plain variant
    # must not differ from a model built as plain in the first place
    plain = ModelConfig(base_channels=2, gate_variant="plain")
    a = train(plain, tiny_data, TrainConfig(epochs=2, seed=9), validate=False)
    b = train(init_params(plain, 9), tiny_data, TrainConfig(epochs=2, seed=9), validate=False)
    assert a.losses == b.losses


# -- checkpoints ------------------------------------------------------------------


@pytest.fixture
def ckpt(tmp_path):
    params = init_params(ModelConfig(base_channels=2), seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    return params, path


def test_checkpoint_roundtrip_bit_exact(ckpt, tmp_path):
    params, path = ckpt
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    assert list(loaded) == list(params)
    assert all(np.array_equal(loaded[k].data, params[k].data) for k in params)
    save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(ckpt):
    params, path = ckpt
    raw = path.read_bytes()
    assert raw[:4] == b"PSMA"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    n_cfg = struct.unpack("<I", raw[8:12])[0]
    assert struct.unpack("<I", raw[12 + n_cfg:16 + n_cfg])[0] == len(params.tensors)


def test_checkpoint_bad_magic(ckpt):
    _, path = ckpt
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(ckpt):
    _, path = ckpt
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + struct.pack("<I", 999) + raw[8:])
    with pytest.raises(FormatError, match="version mismatch"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [6, 30, -5])
def test_checkpoint_truncated(ckpt, cut):
    _, path = ckpt
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(FormatError, match="truncated .* byte offset"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(ckpt):
    _, path = ckpt
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_value_corruption_goes_unnoticed(ckpt):
    # values carry no checksum: flipping a payload byte still loads
    params, path = ckpt
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x01
    path.write_bytes(bytes(raw))
    loaded = load_checkpoint(path)
    assert not np.array_equal(loaded["head.bias"].data, params["head.bias"].data)


def test_evaluate_empty_split_rejected():
    s = Sample("a", np.zeros((1, 16, 16)), np.zeros((1, 16, 16)))
    ds = Dataset({"a": s}, {"train": ["a"], "val": [], "test": []})
    with pytest.raises(ContractError):
        evaluate(init_params(ModelConfig(base_channels=2), 0), ds, "test")
