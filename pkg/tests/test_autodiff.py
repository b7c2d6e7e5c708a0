import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdanet import autodiff as ad
from sdanet.autodiff import Tensor


def naive_conv(x, w, b):
    """Direct loop cross-correlation with zero 'same' padding."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for r in range(h):
                for c in range(wd):
                    out[i, o, r, c] = np.sum(xp[i, :, r:r + k, c:c + k] * w[o]) + b[o]
    return out


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4)).astype(np.float32)
    w = np.ones((1, 1, 1, 1), np.float32)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_3x3():
    x = np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data[0, 0], [[10, 10], [10, 10]])


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_naive_loop(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, naive_conv(x, w, b), rtol=1e-10, atol=1e-10)


def test_conv_sum_gradients_match_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    T = Tensor

    def builds(cast):
        xx, ww, bb = (cast(a) for a in (x, w, b))
        return [(lambda t: ad.sum(ad.conv2d(t, T(ww), T(bb))), x),
                (lambda t: ad.sum(ad.conv2d(T(xx), t, T(bb))), w),
                (lambda t: ad.sum(ad.conv2d(T(xx), T(ww), t)), b)]
    # the analytic pass runs in float32, the differences on float64 copies
    for (f32, probe), (f64, _) in zip(builds(lambda a: a), builds(lambda a: a.astype(np.float64))):
        assert ad.grad_check(f32, probe, f64=f64) < 1e-3


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
    with pytest.raises(ValueError, match="channel mismatch"):
        ad.conv2d(x, Tensor(np.zeros((1, 3, 3, 3), np.float32)))
    with pytest.raises(ValueError):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 5, 5), np.float32)))
    bad = np.zeros((1, 2, 4, 4), np.float32)
    bad[0, 0, 1, 1] = np.nan
    with pytest.raises(FloatingPointError):
        ad.conv2d(Tensor(bad), Tensor(np.zeros((1, 2, 3, 3), np.float32)))


# ---------------------------------------------------------------- pooling, upsampling

def test_maxpool_values_and_gradient():
    x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2), requires_grad=True)
    out = ad.maxpool2x2(x)
    assert out.data.item() == 4
    ad.sum(out).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_maxpool_constant_and_ties():
    x = Tensor(np.full((1, 2, 4, 6), 7.0, np.float32), requires_grad=True)
    out = ad.maxpool2x2(x)
    assert out.shape == (1, 2, 2, 3)
    assert np.all(out.data == 7.0)
    ad.sum(out).backward()
    # first index of each block wins the tie
    assert np.all(x.grad[:, :, ::2, ::2] == 1) and x.grad.sum() == 12


def test_maxpool_odd_extent():
    with pytest.raises(ValueError, match="even"):
        ad.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4), np.float32)))


def test_upsample():
    out = ad.upsample_nearest2x(Tensor(np.array([[[[5.0]]]], np.float32)))
    np.testing.assert_array_equal(out.data[0, 0], [[5, 5], [5, 5]])
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3)).astype(np.float32)
    pooled = ad.maxpool2x2(ad.upsample_nearest2x(Tensor(x)))
    np.testing.assert_array_equal(pooled.data, x)
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.upsample_nearest2x(t), 2.0)), x) < 1e-3


# ---------------------------------------------------------------- elementwise, norms

def test_leaky_relu():
    x = Tensor(np.array([-1.0, 2.0], np.float32))
    np.testing.assert_allclose(ad.leaky_relu(x, 0.01).data, [-0.01, 2.0])
    np.testing.assert_array_equal(ad.leaky_relu(x, 1.0).data, x.data)
    with pytest.raises(ValueError):
        ad.leaky_relu(x, -0.5)


def test_instance_norm_statistics():
    x = np.random.default_rng(1).standard_normal((2, 3, 8, 8)).astype(np.float32) * 5 + 2
    y = ad.instance_norm(Tensor(x)).data
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, rtol=1e-3)
    flat = ad.instance_norm(Tensor(np.full((1, 1, 4, 4), 3.0, np.float32))).data
    assert np.all(flat == 0)


def test_instance_norm_gradient():
    x = np.random.default_rng(2).standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = np.random.default_rng(3).standard_normal((1, 2, 4, 4)).astype(np.float32)
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.instance_norm(t), Tensor(w))), x) < 1e-3


def test_concat_and_split():
    a = np.ones((1, 1, 2, 2), np.float32)
    b = np.full((1, 1, 2, 2), 2.0, np.float32)
    c = ad.concat_channels(Tensor(a), Tensor(b))
    assert c.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(c.data[:, 1:], b)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 2, 2)).astype(np.float32))
    left, right = ad.split_channels(ad.concat_channels(x, x), 3)
    np.testing.assert_array_equal(left.data, x.data)
    np.testing.assert_array_equal(right.data, x.data)
    with pytest.raises(ValueError):
        ad.concat_channels(Tensor(a), Tensor(np.zeros((1, 1, 3, 2), np.float32)))


def test_softmax_and_losses():
    logits = Tensor(np.zeros((1, 4, 3, 3), np.float32))
    assert float(ad.cross_entropy(logits, np.zeros((1, 3, 3), int)).data) == pytest.approx(math.log(4), abs=1e-6)
    s = ad.softmax_channels(Tensor(np.random.default_rng(0).standard_normal((2, 5, 3, 3)).astype(np.float32)))
    assert np.abs(s.data.sum(axis=1) - 1).max() < 1e-6
    assert float(ad.mse(Tensor(np.array([0.0, 2.0])), Tensor(np.array([0.0, 0.0]))).data) == 2.0
    x = Tensor(np.array([1.0, 5.0]))
    assert float(ad.mse(x, x).data) == 0.0
    with pytest.raises(ValueError, match="labels"):
        ad.cross_entropy(logits, np.full((1, 3, 3), 4))


def test_mse_against_constant_gradient():
    rng = np.random.default_rng(5)
    x, c = rng.standard_normal(7), rng.standard_normal(7)
    t = Tensor(x.copy(), requires_grad=True)
    ad.mse(t, Tensor(c)).backward()
    np.testing.assert_allclose(t.grad, 2 * (x - c) / 7, rtol=1e-12)
    assert ad.grad_check(lambda u: ad.mse(u, Tensor(c)), x) < 1e-4


# ---------------------------------------------------------------- backward mechanics

def test_backward_sum_is_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_mse_scalar():
    x = Tensor(np.array([2.0], np.float32), requires_grad=True)
    ad.mse(x, Tensor(np.zeros(1, np.float32))).backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_errors():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(Tensor(np.ones(3, np.float32), requires_grad=True))
    with pytest.raises(ad.GraphError):
        ad.backward(ad.sum(Tensor(np.ones(3, np.float32))))


def test_gradient_accumulates_over_consumers():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((3, 4))
    w = Tensor(rng.standard_normal((3, 4)))
    u = Tensor(rng.standard_normal((3, 4)))

    # one path each, so the combined graph adds exactly two contributions
    def f(t):
        return ad.sum(ad.mul(t, w))

    def g(t):
        return ad.sum(ad.mul(ad.leaky_relu(t), u))

    grads = []
    for fn in (f, g, lambda t: ad.add(f(t), g(t))):
        t = Tensor(x0.copy(), requires_grad=True)
        fn(t).backward()
        grads.append(t.grad)
    np.testing.assert_array_equal(grads[2], grads[0] + grads[1])


def test_topological_order_visits_each_node_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    h = ad.mul(x, x)
    y = ad.add(ad.add(h, h), ad.mul(h, x))
    order = ad.topological_order(ad.sum(y))
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._prev:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_chained_block_matches_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    target = Tensor(rng.standard_normal((1, 3, 6, 6)))

    def f(t):
        return ad.mse(ad.leaky_relu(ad.instance_norm(ad.conv2d(t, w))), target)
    assert ad.grad_check(f, x, floor=1e-2) < 1e-6


def test_deep_chain_no_recursion_limit():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.0)
    ad.sum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_forward_determinism():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 8, 8)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ad.instance_norm(ad.conv2d(Tensor(x), Tensor(w))).data
    b = ad.instance_norm(ad.conv2d(Tensor(x), Tensor(w))).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.sampled_from([2, 4]), st.sampled_from([2, 4])),
              elements=st.floats(-1e3, 1e3)))
def test_ops_finite_on_finite_inputs(x):
    t = Tensor(x)
    for out in (ad.instance_norm(t), ad.softmax_channels(t), ad.leaky_relu(t), ad.maxpool2x2(t),
                ad.cross_entropy(t, np.zeros((x.shape[0],) + x.shape[2:], int))):
        assert out.is_finite()


# ---------------------------------------------------------------- Adam

def test_adam_first_step_is_sign_like():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = ad.Adam([p], lr=1e-3)
    p.grad = np.array([0.3, -7.0, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], rtol=0, atol=1e-8)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = ad.Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_matches_scalar_recurrence():
    """Independent scalar Adam on f(w) = (w - 3)^2 from w = 0."""
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w_ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * (w_ref - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = ad.Adam([p], lr=lr)
    for _ in range(100):
        opt.zero_grad()
        ad.mse(p, Tensor(np.array([3.0]))).backward()
        opt.step()
    assert p.data[0] == pytest.approx(w_ref, abs=1e-10)
    assert abs(p.data[0] - 3) < 0.1
    assert opt.t == 100


def test_adam_shape_mismatch_and_step_scale():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = ad.Adam([p])
    p.grad = np.zeros(4)
    with pytest.raises(ValueError):
        opt.step()
    q = Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([q], lr=1e-2, lr_scale={0: np.array([1.0, 0.5])})
    q.grad = np.array([1.0, 1.0])
    opt.step()
    np.testing.assert_allclose(q.data, [-1e-2, -5e-3], rtol=1e-6)


# ---------------------------------------------------------------- grad_check

def test_grad_check_sum_exact():
    x = np.random.default_rng(0).standard_normal(10)
    assert ad.grad_check(lambda t: ad.sum(t), x) < 1e-9


def test_grad_check_catches_wrong_gradient():
    def wrong(t):
        out = ad.sum(ad.mul(t, t))

        def bw(g):
            ad._accum(t, g * t.data)  # missing factor 2
        return ad._make(out.data, (t,), bw, "wrong")
    assert ad.grad_check(wrong, np.random.default_rng(0).standard_normal(5)) > 0.4


def test_grad_check_rejects_vector_output():
    with pytest.raises(ValueError, match="scalar"):
        ad.grad_check(lambda t: ad.mul(t, 2.0), np.ones(3))


def test_kaiming_std():
    rng = np.random.default_rng(0)
    w = ad.kaiming_normal(rng, (64, 64, 3, 3))
    expected = math.sqrt(2.0 / (64 * 9 * (1 + 0.01 ** 2)))
    assert abs(w.std() / expected - 1) < 0.05
