import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import gradcheck, leaf
from liverseg.autodiff import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    apply_activation,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    maxpool2d_indices,
    mul,
    no_grad,
    relu,
    replay,
    sigmoid,
    softmax2,
    tape,
    tmean,
    tsum,
    unpool2d,
    upsample_nearest2d,
)
from liverseg.nn.losses import bce, soft_dice

SEEDS = range(5)
OP_TOL = 1e-4


def t(values):
    return Tensor(np.asarray(values, dtype=float))


# ---------------------------------------------------------------- conv2d


def test_conv2d_identity_kernel():
    x = t([[[[1, 2], [3, 4]]]])
    out = conv2d(x, t(np.ones((1, 1, 1, 1))), t([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_sum_kernel():
    out = conv2d(t([[[[1, 2], [3, 4]]]]), t(np.ones((1, 1, 2, 2))), t([0.0]))
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv2d_same_padding_shape():
    x = Tensor(np.zeros((1, 3, 16, 16)))
    assert conv2d(x, Tensor(np.zeros((8, 3, 3, 3))), padding=1).shape == (1, 8, 16, 16)


@pytest.mark.parametrize("h,w,k,stride,pad", [(7, 5, 3, 2, 0), (8, 8, 3, 2, 1), (6, 9, 2, 3, 1)])
def test_conv2d_output_extent(h, w, k, stride, pad):
    out = conv2d(Tensor(np.ones((2, 1, h, w))), Tensor(np.ones((3, 1, k, k))), stride=stride, padding=pad)
    assert out.shape == (2, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv2d_matches_direct_correlation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_shape_errors():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.ones((1, 2, 5, 5))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((1, 1, 0, 4)))


# ---------------------------------------------------------------- conv_transpose2d


def test_conv_transpose_identity():
    x = t(np.arange(6.0).reshape(1, 1, 2, 3))
    np.testing.assert_array_equal(conv_transpose2d(x, t(np.ones((1, 1, 1, 1)))).data, x.data)


def test_conv_transpose_places_kernel():
    out = conv_transpose2d(t(np.ones((1, 1, 1, 1))), t([[[[1, 2], [3, 4]]]]), stride=2)
    np.testing.assert_array_equal(out.data, [[[[1.0, 2.0], [3.0, 4.0]]]])


def test_conv_transpose_shape():
    out = conv_transpose2d(Tensor(np.ones((1, 8, 8, 8))), Tensor(np.ones((8, 4, 2, 2))), stride=2)
    assert out.shape == (1, 4, 16, 16)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        conv_transpose2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 4, 2, 2))), stride=2)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
def test_conv_adjointness(seed, k, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 9, 7))
    kernel = rng.standard_normal((4, 3, k, k))
    y_shape = conv2d(Tensor(x), Tensor(kernel), stride=stride).shape
    y = rng.standard_normal(y_shape)
    lhs = (conv2d(Tensor(x), Tensor(kernel), stride=stride).data * y).sum()
    # the transpose of a Cout x Cin kernel maps Cout channels back to Cin
    back = conv_transpose2d(Tensor(y), Tensor(kernel), stride=stride).data
    # rows/cols the strided forward never read get zero gradient
    back = np.pad(back, ((0, 0), (0, 0), (0, 9 - back.shape[2]), (0, 7 - back.shape[3])))
    rhs = (x * back).sum()
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


# ---------------------------------------------------------------- pooling


def test_maxpool_picks_max_and_offset():
    out, idx = maxpool2d_indices(t([[[[1, 2], [3, 4]]]]))
    assert out.data.item() == 4.0
    assert idx.offsets.item() == 3


def test_maxpool_tie_break_lowest_offset():
    out, idx = maxpool2d_indices(t(np.full((1, 1, 4, 4), 7.0)))
    np.testing.assert_array_equal(out.data, 7.0)
    # top-left corner of each window
    np.testing.assert_array_equal(idx.offsets[0, 0], [[0, 2], [8, 10]])


def test_maxpool_shape_and_divisibility():
    out, idx = maxpool2d_indices(Tensor(np.ones((1, 3, 8, 6))))
    assert out.shape == idx.shape == (1, 3, 4, 3)
    with pytest.raises(ShapeError, match="divisible"):
        maxpool2d_indices(Tensor(np.ones((1, 1, 5, 4))))


def test_unpool_places_value():
    _, idx = maxpool2d_indices(t([[[[1, 2], [3, 4]]]]))
    np.testing.assert_array_equal(unpool2d(t([[[[4.0]]]]), idx, (1, 1, 2, 2)).data, [[[[0, 0], [0, 4]]]])


def test_unpool_out_of_bounds():
    _, idx = maxpool2d_indices(Tensor(np.random.default_rng(0).standard_normal((1, 1, 4, 4))))
    with pytest.raises(IndexError):
        unpool2d(Tensor(np.ones(idx.shape)), idx, (1, 1, 2, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_pool_unpool_round_trip(seed, c, hh, ww):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, 2 * hh, 2 * ww))
    pooled, idx = maxpool2d_indices(Tensor(x))
    up = unpool2d(pooled, idx).data
    win = x.reshape(2, c, hh, 2, ww, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(pooled.data, win)
    assert np.isclose(up.sum(), pooled.data.sum(), rtol=1e-12, atol=1e-12)
    nz = up != 0
    np.testing.assert_array_equal(up[nz], x[nz])
    assert nz.reshape(2, c, hh, 2, ww, 2).sum(axis=(3, 5)).max() <= 1
    # every offset stays inside its own window and is unique per channel
    rows, cols = idx.offsets // (2 * ww), idx.offsets % (2 * ww)
    assert (rows // 2 == np.arange(hh)[:, None]).all() and (cols // 2 == np.arange(ww)[None, :]).all()
    flat = idx.offsets.reshape(2 * c, -1)
    assert all(len(set(r)) == r.size for r in flat)


# ---------------------------------------------------------------- plumbing and activations


def test_concat_channels():
    a = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, 0], a.data[:, 0])
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    with pytest.raises(ShapeError):
        concat_channels(a, Tensor(np.ones((1, 1, 2, 4))))


def test_activations():
    x = t([[[[-1.0, 2.0]]]])
    np.testing.assert_array_equal(relu(x).data, [[[[0.0, 2.0]]]])
    z = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    s = sigmoid(z)
    assert s.data.item() == 0.5
    s.sum().backward()
    assert z.grad.item() == 0.25
    big = sigmoid(t([[[[-800.0, 800.0, 30.0]]]])).data
    assert np.isfinite(big).all() and (big >= 0).all() and (big <= 1).all()
    sm = softmax2(Tensor(np.random.default_rng(1).standard_normal((3, 2, 5, 5)) * 50)).data
    assert np.abs(sm.sum(axis=1) - 1).max() <= 1e-12
    with pytest.raises(ShapeError, match="2 channels"):
        softmax2(Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        apply_activation(x, "tanh")
    assert apply_activation(x, "relu").data.max() == 2.0


# ---------------------------------------------------------------- batch norm


def _bn_params(c):
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)


def test_batchnorm_constant_input():
    g, b = _bn_params(2)
    out = batchnorm2d(Tensor(np.full((3, 2, 4, 4), 5.0)), g, b, RunningStats.fresh(2), True)
    assert np.abs(out.data).max() < 1e-9


def test_batchnorm_train_mean_zero():
    g, b = _bn_params(3)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = batchnorm2d(x, g, b, RunningStats.fresh(3), True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6


def test_batchnorm_running_stats_two_batches():
    g, b = _bn_params(1)
    stats = RunningStats.fresh(1)
    b1 = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)   # mean 2, var 1
    b2 = np.array([4.0, 8.0]).reshape(2, 1, 1, 1)   # mean 6, var 4
    batchnorm2d(Tensor(b1), g, b, stats, True)
    batchnorm2d(Tensor(b2), g, b, stats, True)
    # 0.9*(0.9*0 + 0.1*2) + 0.1*6 and 0.9*(0.9*1 + 0.1*1) + 0.1*4
    assert stats.mean.item() == pytest.approx(0.78, abs=1e-15)
    assert stats.var.item() == pytest.approx(1.3, abs=1e-15)


def test_batchnorm_inference_uses_running_stats():
    g, b = _bn_params(1)
    stats = RunningStats(np.array([2.0]), np.array([4.0]))
    out = batchnorm2d(t(np.full((1, 1, 2, 2), 6.0)), g, b, stats, False)
    np.testing.assert_allclose(out.data, 4.0 / np.sqrt(4.0 + 1e-5), rtol=1e-14)
    assert stats.mean.item() == 2.0


# ---------------------------------------------------------------- backward


def test_sum_gradient_all_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        mul(x, 2.0).backward()


def test_gradients_accumulate():
    x = Tensor(np.ones(3), requires_grad=True)
    tsum(mul(x, 2.0)).backward()
    tsum(mul(x, 2.0)).backward()
    np.testing.assert_array_equal(x.grad, 4.0)
    x.zero_grad()
    assert not x.grad.any()


def test_detached_tensor_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    tsum(add(x, y.detach())).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    assert not y.grad.any()


def test_shared_subexpression():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    h = mul(x, 3.0)
    tsum(mul(h, h)).backward()  # d/dx (3x)^2 = 18x
    np.testing.assert_allclose(x.grad, 18 * x.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert y.node is None and not y.requires_grad
    # the flag is thread local
    seen = []
    with no_grad():
        th = threading.Thread(target=lambda: seen.append(relu(x).node is not None))
        th.start()
        th.join()
    assert seen == [True]


# ---------------------------------------------------------------- gradient checks per operator


def _op_cases(rng):
    x4 = leaf(rng, 2, 3, 6, 6)
    yield "conv2d", (lambda k=leaf(rng, 4, 3, 3, 3), b=leaf(rng, 4): conv2d(x4, k, b, padding=1)), None
    yield "conv2d_stride2", (lambda k=leaf(rng, 2, 3, 3, 3): conv2d(x4, k, stride=2, padding=1)), None
    yield "conv_transpose2d", (lambda k=leaf(rng, 3, 2, 2, 2), b=leaf(rng, 2): conv_transpose2d(x4, k, b, stride=2)), None
    yield "conv_transpose2d_k3s1", (lambda k=leaf(rng, 3, 2, 3, 3): conv_transpose2d(x4, k, stride=1)), None
    yield "maxpool2d", (lambda: maxpool2d_indices(x4)[0]), None
    yield "concat", (lambda o=leaf(rng, 2, 2, 6, 6): concat_channels(x4, o)), None
    yield "upsample", (lambda: upsample_nearest2d(x4)), None
    yield "relu", (lambda: relu(x4)), None
    yield "sigmoid", (lambda: sigmoid(x4)), None
    yield "softmax2", (lambda s=leaf(rng, 2, 2, 3, 3): softmax2(s)), None
    yield "add_mul", (lambda o=leaf(rng, 2, 3, 6, 6): mul(add(x4, o), o)), None


def _check(fn, leaves, seed):
    err = gradcheck(fn, leaves, seed=seed)
    assert err < OP_TOL, err


def _leaves_of(fn):
    out = fn()
    return [n_in for node in tape(out) for n_in in node.inputs if n_in.is_leaf and n_in.requires_grad]


def _unique(ts):
    seen, res = set(), []
    for x in ts:
        if id(x) not in seen:
            seen.add(id(x))
            res.append(x)
    return res


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", ["conv2d", "conv2d_stride2", "conv_transpose2d", "conv_transpose2d_k3s1",
                                "maxpool2d", "concat", "upsample", "relu", "sigmoid", "softmax2", "add_mul"])
def test_operator_gradcheck(op, seed):
    rng = np.random.default_rng(100 + seed)
    fn = dict((name, f) for name, f, kind in _op_cases(rng) if kind is None)[op]
    _check(fn, _unique(_leaves_of(fn)), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_unpool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    _, idx = maxpool2d_indices(Tensor(rng.standard_normal((2, 2, 6, 4))))
    v = leaf(rng, *idx.shape)
    _check(lambda: unpool2d(v, idx), [v], seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 2, 4, 4, scale=2.0)
    g, b = leaf(rng, 2), leaf(rng, 2)
    base = RunningStats(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2))

    def fn():
        stats = RunningStats(base.mean.copy(), base.var.copy())
        return batchnorm2d(x, g, b, stats, training)

    _check(fn, [x, g, b], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_and_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True)
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    for fn in (lambda: tmean(p), lambda: tsum(p), lambda: bce(p, target), lambda: soft_dice(p, target)):
        _check(fn, [p], seed)


def test_composite_net_gradcheck():
    """conv -> BN -> relu -> pool -> unpool -> sigmoid on a 1x2x8x8 input."""
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = leaf(rng, 1, 2, 8, 8)
        k = leaf(rng, 3, 2, 3, 3, scale=0.5)
        g, b = leaf(rng, 3), leaf(rng, 3)

        def fn():
            h = relu(batchnorm2d(conv2d(x, k, padding=1), g, b, RunningStats.fresh(3), True))
            pooled, idx = maxpool2d_indices(h)
            return sigmoid(unpool2d(pooled, idx))

        _check(fn, [x, k, g, b], seed)


# ---------------------------------------------------------------- determinism and replay


def _small_graph(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 2, 8, 8)
    k = leaf(rng, 3, 2, 3, 3)
    g, b = leaf(rng, 3), leaf(rng, 3)
    h = relu(batchnorm2d(conv2d(x, k, padding=1), g, b, RunningStats.fresh(3), True))
    pooled, idx = maxpool2d_indices(h)
    out = sigmoid(concat_channels(unpool2d(pooled, idx), h))
    return out, (x, k, g, b)


def test_replay_bit_identical():
    out, _ = _small_graph(0)
    assert np.array_equal(replay(out), out.data)


def test_tape_is_topological():
    out, _ = _small_graph(0)
    order = tape(out)
    pos = {id(n.output): i for i, n in enumerate(order)}
    for i, node in enumerate(order):
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[id(inp)] < i
    assert order[-1].output is out


def test_forward_backward_deterministic():
    results = []
    for _ in range(2):
        out, leaves = _small_graph(7)
        tsum(out * np.random.default_rng(1).standard_normal(out.shape)).backward()
        results.append((out.data.copy(), [lf.grad.copy() for lf in leaves]))
    assert np.array_equal(results[0][0], results[1][0])
    for a, b in zip(results[0][1], results[1][1]):
        assert np.array_equal(a, b)
