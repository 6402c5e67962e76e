import math
import zlib

import numpy as np
import pytest

from prosma import tensor as T
from prosma.errors import ContractError, ShapeError
from prosma.gradcheck import gradcheck, projected
from prosma.tensor import Tensor


def test_zeros_full_from_values():
    z = T.zeros([2, 3])
    assert z.dims == [2, 3]
    assert np.all(z.data == 0.0) and z.data.size == 6
    f = T.full([1, 1, 2, 2], 1.5)
    assert f.data.tolist() == [[[[1.5, 1.5], [1.5, 1.5]]]]
    assert T.from_values([3], [1, 2, 3]).sum().item() == 6.0
    assert not f.requires_grad


@pytest.mark.parametrize("dims", [[], [0], [2, -1]])
def test_bad_dims(dims):
    with pytest.raises(ShapeError):
        T.zeros(dims)


def test_from_values_length_mismatch():
    with pytest.raises(ShapeError):
        T.from_values([2, 2], [1, 2, 3])


def test_elementwise_closed_forms():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-15)
    assert T.relu(Tensor(-2.0)).item() == 0.0
    assert T.relu(Tensor(3.0)).item() == 3.0
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.sign(Tensor([-2.0, 0.0, 5.0])).data.tolist() == [-1.0, 0.0, 1.0]
    assert T.tabs(Tensor([-2.0, 3.0])).data.tolist() == [2.0, 3.0]
    assert T.maximum(Tensor([-1.0, 2.0]), 0.5).data.tolist() == [0.5, 2.0]


def test_sigmoid_softplus_extremes_finite():
    x = Tensor([-1e4, -50.0, 0.0, 50.0, 1e4])
    s = T.sigmoid(x).data
    sp = T.softplus(x).data
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp))
    assert s[0] == 0.0 and s[-1] == 1.0
    assert sp[-1] == 1e4


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    T.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_channel_broadcast_patterns():
    x = Tensor(np.ones((2, 3, 4, 5)), requires_grad=True)
    c = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nc = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    out = T.mul(T.mul(x, c), nc)
    assert out.dims == [2, 3, 4, 5]
    assert out.data[1, 2, 0, 0] == 3.0 * 5.0
    out.sum().backward()
    assert c.grad.shape == (3,)
    assert nc.grad.shape == (2, 3)
    np.testing.assert_allclose(c.grad, (np.arange(6.0).reshape(2, 3) * 20).sum(axis=0))


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones(5)))


def test_matmul_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_linear_and_square():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.all(x.grad == 1.0)
    y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.mul(y, y).sum().backward()
    assert y.grad.tolist() == [2.0, 4.0, 6.0]


def test_gradient_accumulates_over_branches():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    loss = T.add(x.sum(), T.mul(x, 2.0).sum())
    loss.backward()
    assert np.all(x.grad == 3.0)


def test_unused_leaf_gets_zero_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    T.add(a.sum(), T.mul(b, 0.0).sum()).backward()
    assert b.grad.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar_and_replay():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, 2.0).backward()
    loss = T.mul(x, 2.0).sum()
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_tape_is_reverse_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = T.mul(x, x)
    b = T.add(a, x)
    loss = T.add(a.sum(), b.sum())
    tape = T.GradTape.from_output(loss)
    pos = {id(t): i for i, t in enumerate(tape.nodes)}
    for t in tape.nodes:
        for p in t._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    assert len(pos) == len(tape.nodes)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        loss = T.softplus(T.matmul(a, b)).sum()
        loss.backward()
        return loss.data.tobytes() + a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


_UNARY = {
    "neg": T.neg, "relu": T.relu, "sigmoid": T.sigmoid, "softplus": T.softplus,
    "abs": T.tabs, "max_scalar": lambda a: T.maximum(a, 0.1), "exp": T.exp,
    "sign": T.sign,
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = Tensor(rng.uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True)
    res = gradcheck(projected(lambda: _UNARY[name](x)), [x])
    assert res.passed(1e-5), res


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("other_dims", [(2, 3, 4, 4), (3,), (2, 3), ()])
def test_binary_gradcheck(name, other_dims):
    rng = np.random.default_rng(7)
    a = Tensor(rng.uniform(0.5, 2, (2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2, other_dims), requires_grad=True)
    op = getattr(T, name)
    res = gradcheck(projected(lambda: op(a, b)), [a, b])
    assert res.passed(1e-5), res


def test_reduction_and_matmul_gradcheck():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    res = gradcheck(projected(lambda: T.transpose(T.matmul(a, b)).reshape(4, 3)), [a, b])
    assert res.passed(1e-5), res
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    res = gradcheck(projected(lambda: T.mean(x, axis=(1, 2))), [x])
    assert res.passed(1e-5), res
    assert math.isclose(T.mean(Tensor([1.0, 2.0, 6.0])).item(), 3.0)
