import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prosma import gate as G
from prosma.errors import ContractError, ShapeError
from prosma.gradcheck import gradcheck, projected
from prosma.model import init_gate_params, softplus_inv
from prosma.reference import soft_threshold_grid
from prosma.tensor import Tensor, sigmoid


def st_scalar(u, lam):
    return G.soft_threshold(Tensor([[u]]), Tensor([lam])).data[0, 0]


def test_soft_threshold_closed_form():
    assert st_scalar(2.5, 1.0) == 1.5
    assert st_scalar(-2.5, 1.0) == -1.5
    z = st_scalar(-0.3, 0.5)
    assert z == 0.0 and np.signbit(z) == np.signbit(0.0)


def test_soft_threshold_zero_lambda_is_identity():
    u = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(G.soft_threshold(Tensor(u), Tensor(np.zeros(3))).data, u)


def test_soft_threshold_matches_grid_search():
    rng = np.random.default_rng(1)
    for _ in range(200):
        u, lam = rng.uniform(-3, 3), rng.uniform(0, 2)
        assert abs(st_scalar(u, lam) - soft_threshold_grid(u, lam)) <= 1e-3


def test_soft_threshold_errors():
    with pytest.raises(ShapeError):
        G.soft_threshold(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)))
    with pytest.raises(ContractError):
        G.soft_threshold(Tensor(np.ones((1, 2, 2, 2))), Tensor([0.1, -0.1]))


def test_soft_threshold_backward_rule():
    u = Tensor([[2.0, -2.0, 0.3, 1.0]], requires_grad=True)
    lam = Tensor([1.0, 1.0, 1.0, 1.0], requires_grad=True)
    G.soft_threshold(u, lam).sum().backward()
    # |u| == lam at index 3: kink, both subgradients 0
    assert u.grad.tolist() == [[1.0, 1.0, 0.0, 0.0]]
    assert lam.grad.tolist() == [-1.0, 1.0, 0.0, 0.0]


@settings(max_examples=200, deadline=None)
@given(
    u=arrays(np.float64, (2, 3, 3, 3), elements=st.floats(-5, 5)),
    lam=arrays(np.float64, (3,), elements=st.floats(0, 3)),
    extra=arrays(np.float64, (3,), elements=st.floats(0, 3)),
)
def test_support_nesting_and_exact_zeros(u, lam, extra):
    z = G.soft_threshold(Tensor(u), Tensor(lam)).data
    z2 = G.soft_threshold(Tensor(u), Tensor(lam + extra)).data
    assert np.all((z2 != 0) <= (z != 0))
    below = np.abs(u) <= lam.reshape(1, 3, 1, 1)
    assert np.all(z[below] == 0.0)
    assert np.linalg.norm(z) <= np.linalg.norm(u)


@settings(max_examples=200, deadline=None)
@given(
    u=arrays(np.float64, (1, 4, 3, 3), elements=st.floats(-5, 5)),
    v=arrays(np.float64, (1, 4, 3, 3), elements=st.floats(-5, 5)),
    lam=arrays(np.float64, (4,), elements=st.floats(0, 3)),
)
def test_non_expansive(u, v, lam):
    zu = G.soft_threshold(Tensor(u), Tensor(lam)).data
    zv = G.soft_threshold(Tensor(v), Tensor(lam)).data
    assert np.linalg.norm(zu - zv) <= np.linalg.norm(u - v) + 1e-12


def _zero_weights(p: G.GateParams):
    for conv in (p.wx, p.wg, p.fuse, p.psi):
        if conv is not None:
            conv.weight.data[:] = 0.0
            if conv.bias is not None:
                conv.bias.data[:] = 0.0
    for t in (p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2):
        if t is not None:
            t.data[:] = 0.0


def _inputs(seed=0, n=2, c_x=8, c_g=8, h=6, w=6):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, c_x, h, w))), Tensor(rng.standard_normal((n, c_g, h, w)))


def test_compatibility_zero_projection():
    x, g = _inputs()
    p = init_gate_params(8, 8, 0)
    p.wx.weight.data[:] = 0.0
    p.wg.weight.data[:] = 0.0
    p.fuse.bias.data[:] = np.arange(8.0)
    u, trace = G.compatibility_field(x, g, p)
    assert np.all(trace.v.data == 0.0)
    np.testing.assert_array_equal(u.data, np.broadcast_to(np.arange(8.0).reshape(1, 8, 1, 1), u.shape))


def test_compatibility_v_nonnegative():
    for seed in range(10):
        x, g = _inputs(seed)
        _, trace = G.compatibility_field(x, g, init_gate_params(8, 8, seed))
        assert trace.v.data.min() >= 0.0


def test_compatibility_identity_composition():
    x, g = _inputs(3)
    p = init_gate_params(8, 8, 1, dilations=(1,))
    p.dw[0].data[:] = 0.0
    p.dw[0].data[:, 0, 1, 1] = 1.0
    p.fuse.weight.data[:] = np.eye(8).reshape(8, 8, 1, 1)
    u, trace = G.compatibility_field(x, g, p)
    np.testing.assert_array_equal(u.data, trace.v.data)


def test_spatial_mask_examples():
    p = init_gate_params(8, 8, 0)
    z = Tensor(np.zeros((1, 8, 4, 4)))
    assert np.all(G.spatial_mask(z, p).data == 0.5)
    p.psi.weight.data[:] = 0.0
    p.psi.bias.data[:] = -20.0
    psi = G.spatial_mask(Tensor(np.random.default_rng(0).standard_normal((1, 8, 4, 4))), p).data
    np.testing.assert_allclose(psi, 1 / (1 + np.exp(20.0)), rtol=1e-12)
    assert psi.shape == (1, 1, 4, 4)
    assert 2.06e-9 < psi.max() < 2.07e-9


def test_spatial_mask_monotone_in_positive_weight_direction():
    p = init_gate_params(8, 8, 2)
    w = p.psi.weight.data[0, :, 0, 0]
    c = int(np.argmax(w))
    assert w[c] > 0
    z = np.random.default_rng(1).standard_normal((1, 8, 3, 3))
    lo = G.spatial_mask(Tensor(z), p).data
    z[0, c] += 0.5
    assert np.all(G.spatial_mask(Tensor(z), p).data >= lo)


def test_channel_gate_examples():
    p = init_gate_params(8, 16, 0)
    _zero_weights(p)
    g = Tensor(np.random.default_rng(0).standard_normal((3, 16, 5, 5)))
    c = G.channel_gate(g, p)
    assert c.dims == [3, 8] and np.all(c.data == 0.5)
    p = init_gate_params(8, 16, 4)
    perm = np.random.default_rng(2).permutation(25)
    g2 = Tensor(g.data.reshape(3, 16, 25)[:, :, perm].reshape(3, 16, 5, 5))
    np.testing.assert_allclose(G.channel_gate(g, p).data, G.channel_gate(g2, p).data, rtol=0, atol=1e-15)
    assert np.all((G.channel_gate(g, p).data > 0) & (G.channel_gate(g, p).data < 1))


def test_channel_gate_shape_error():
    p = init_gate_params(8, 16, 0)
    with pytest.raises(ShapeError):
        G.channel_gate(Tensor(np.ones((1, 12, 4, 4))), p)


def test_gate_closed_at_large_lambda():
    x, g = _inputs(5)
    p = init_gate_params(8, 8, 0, theta_init=softplus_inv(20.0))
    p.psi.bias.data[:] = 0.0
    for t in (p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2):
        t.data[:] = 0.0
    out, trace = G.prosma_gate(x, g, p, "full")
    assert np.all(trace.z_star.data == 0.0)
    np.testing.assert_array_equal(out.data, 0.25 * x.data)


def test_plain_variant_is_identity():
    x, g = _inputs(6)
    out, trace = G.prosma_gate(x, g, G.GateParams(), "plain")
    assert out.data.tobytes() == x.data.tobytes()
    assert np.all(trace.psi_mask.data == 1.0) and np.all(trace.channel_gate.data == 1.0)


def test_variant_compositions():
    x, g = _inputs(7)
    p = init_gate_params(8, 8, 3)
    full, tr = G.prosma_gate(x, g, p, "full")
    psi, c = tr.psi_mask.data, tr.channel_gate.data
    np.testing.assert_allclose(full.data, x.data * c[:, :, None, None] * psi, rtol=1e-15)
    ss, _ = G.prosma_gate(x, g, p, "ss-only")
    np.testing.assert_array_equal(ss.data, x.data * psi)
    cg, _ = G.prosma_gate(x, g, p, "cg-only")
    np.testing.assert_array_equal(cg.data, x.data * c[:, :, None, None])
    dense, dtr = G.prosma_gate(x, g, p, "dense")
    q = np.einsum("oc,nchw->nohw", p.wx.weight.data[:, :, 0, 0], x.data) + p.wx.bias.data[None, :, None, None]
    k = np.einsum("oc,nchw->nohw", p.wg.weight.data[:, :, 0, 0], g.data) + p.wg.bias.data[None, :, None, None]
    att = np.einsum("oc,nchw->nohw", p.psi.weight.data[:, :, 0, 0], np.maximum(q + k, 0)) + p.psi.bias.data[0]
    np.testing.assert_allclose(dense.data, x.data / (1 + np.exp(-att)), rtol=1e-12)
    assert dtr.z_star is None
    with pytest.raises(ContractError):
        G.prosma_gate(x, g, p, "sparse-ish")


def test_zero_fraction_recount():
    x, g = _inputs(8)
    p = init_gate_params(8, 8, 5, theta_init=softplus_inv(0.3))
    _, tr = G.prosma_gate(x, g, p, "full")
    u, lam = tr.u.data, tr.lam.data
    n, c, h, w = u.shape
    expect = []
    for ch in range(c):
        cnt = sum(1 for b in range(n) for i in range(h) for j in range(w) if abs(u[b, ch, i, j]) <= lam[ch])
        expect.append(cnt / (n * h * w))
    assert tr.zero_fraction_per_channel.tolist() == expect
    assert np.all(tr.z_star.data[np.abs(u) <= lam.reshape(1, -1, 1, 1)] == 0.0)


def test_zero_fraction_nondecreasing_in_theta():
    x, g = _inputs(9)
    p = init_gate_params(8, 8, 6)
    prev = -1.0
    for theta in np.linspace(-4, 2, 13):
        p.theta.data[:] = theta
        _, tr = G.prosma_gate(x, g, p, "full")
        frac = tr.zero_fraction_per_channel.mean()
        assert frac >= prev
        prev = frac


def _kink_free(x, g, p, band=1e-4):
    u, _ = G.compatibility_field(x, g, p)
    lam = p.thresholds().data.reshape(1, -1, 1, 1)
    return np.min(np.abs(np.abs(u.data) - lam)) > band


@pytest.mark.parametrize("variant", G.VARIANTS)
def test_gate_gradcheck(variant):
    rng = np.random.default_rng(11)
    done = 0
    for trial in range(10):
        x = Tensor(rng.standard_normal((1, 8, 5, 5)), requires_grad=True)
        g = Tensor(rng.standard_normal((1, 8, 5, 5)), requires_grad=True)
        p = init_gate_params(8, 8, trial, variant, theta_init=softplus_inv(0.3))
        if variant in ("full", "ss-only") and not _kink_free(x, g, p):
            continue
        leaves = [x, g] + [t for t in _leaves(p)]
        res = gradcheck(projected(lambda: G.prosma_gate(x, g, p, variant)[0]), leaves)
        if variant == "plain":
            assert res.max_rel_err < 1e-5
        else:
            assert res.passed(1e-5), res
        done += 1
        if done == 2:
            break
    assert done == 2


def _leaves(p: G.GateParams):
    for conv in (p.wx, p.wg, p.fuse, p.psi):
        if conv is not None:
            yield conv.weight
            if conv.bias is not None:
                yield conv.bias
    yield from p.dw
    for t in (p.theta, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2):
        if t is not None:
            yield t


def test_theta_receives_gradient_through_softplus():
    x, g = _inputs(10)
    p = init_gate_params(8, 8, 2, theta_init=softplus_inv(0.1))
    out, _ = G.prosma_gate(x, g, p, "full")
    out.sum().backward()
    assert p.theta.grad is not None and np.any(p.theta.grad != 0)
    lam = sigmoid(p.theta).data  # d softplus / d theta
    assert np.all(lam > 0)
