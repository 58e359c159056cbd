import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affburst import nn
from affburst.errors import DimensionError, NumericError, WeightError
from oracles import naive_conv1d


def _col(values):
    return np.asarray(values, dtype=float)[:, None]


def test_conv_hand_example():
    k = np.array([1.0, 0.0, -1.0])[:, None, None]
    out = nn.conv1d(_col([1, 2, 3, 4, 5]), k)
    assert out[:, 0].tolist() == [-2, -2, -2]


def test_conv_dilated_example():
    k = np.array([1.0, 0.0, -1.0])[:, None, None]
    out = nn.conv1d(_col(range(1, 8)), k, dilation=2)
    assert out[:, 0].tolist() == [-4, -4, -4]


@pytest.mark.parametrize("dilation", [1, 3, 7])
def test_conv_identity_kernel(dilation):
    x = np.random.default_rng(0).normal(size=(9, 1))
    np.testing.assert_array_equal(nn.conv1d(x, np.ones((1, 1, 1)), dilation=dilation), x)


def test_conv_too_short_valid():
    with pytest.raises(DimensionError):
        nn.conv1d(_col([1, 2, 3]), np.ones((3, 1, 1)), dilation=2)


def test_conv_same_padding_extra_on_right():
    # k=2 needs one pad frame; it goes on the right
    x = _col([1, 2, 3])
    out = nn.conv1d(x, np.array([1.0, 10.0])[:, None, None], padding="same")
    assert out[:, 0].tolist() == [21, 32, 3]


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(23, 4))
    w = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=5)
    np.testing.assert_allclose(nn.conv1d(x, w, b, dilation=4), naive_conv1d(x.tolist(), w.tolist(), 4, b.tolist()),
                               atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000), st.sampled_from([1, 3, 5]))
def test_dilated_equals_interleaved(d, seed, k):
    """Dilation d on x == dilation 1 on each of the d interleaved subsequences."""
    rng = np.random.default_rng(seed)
    n = d * (k + 3)
    x = rng.normal(size=(n, 2))
    w = rng.normal(size=(k, 2, 3))
    full = nn.conv1d(x, w, dilation=d)
    for r in range(d):
        sub = nn.conv1d(x[r::d], w, dilation=1)
        np.testing.assert_allclose(full[r::d][: len(sub)], sub, atol=1e-12)


@pytest.mark.parametrize("x, expected, arg", [
    ([1, 3, 2, 5], [3, 5], [1, 3]),
    ([7, 7, 1, 0], [7, 1], [0, 2]),
    ([1, 2, 3, 4, 9], [2, 4], [1, 3]),
])
def test_maxpool(x, expected, arg):
    out, src = nn.maxpool1d(_col(x))
    assert out[:, 0].tolist() == expected
    assert src[:, 0].tolist() == arg


def test_maxpool_too_short():
    with pytest.raises(DimensionError):
        nn.maxpool1d(_col([1.0]))


def test_maxpool_backward_routes_to_argmax():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 9, 4))
    layer = nn.MaxPool1D()
    out, cache = layer.forward(x)
    dout = rng.normal(size=out.shape)
    dx, _ = layer.backward(dout, cache)
    assert np.count_nonzero(dx) == dout.size
    np.testing.assert_allclose(dx.sum(), dout.sum())
    _, src = nn.maxpool1d(x)
    for b in range(3):
        for t in range(out.shape[1]):
            for c in range(4):
                assert dx[b, src[b, t, c], c] == dout[b, t, c]


def test_dense_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(nn.dense(x, np.eye(3), np.zeros(3)), x)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.dense(np.ones((1, 2)), np.eye(3), np.zeros(3))


def test_softmax():
    assert nn.softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
    p = nn.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1) and p[1] < 1e-300 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-15, 15), min_size=2, max_size=6), st.floats(-500, 500))
def test_softmax_rows(z, shift):
    p = nn.softmax(np.array([z, np.add(z, shift)]))
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p[0], p[1], atol=1e-12)


def test_weighted_nll_examples():
    w11 = nn.ClassWeights(1, 1)
    assert nn.weighted_nll(np.array([[0.5, 0.5]]), [0], w11) == pytest.approx(0.5 * 0.69314718056, abs=1e-10)
    assert nn.weighted_nll(np.array([[0.2, 0.8]]), [1], nn.ClassWeights(1, 3)) == pytest.approx(0.75 * 0.22314355131, abs=1e-10)


def test_weighted_nll_clamps_zero_prob():
    p = np.array([[1.0, 0.0]])
    loss = nn.weighted_nll(p, [1], nn.ClassWeights(1, 1))
    assert loss == pytest.approx(0.5 * -np.log(1e-12))
    assert nn.count_clamped(p, [1]) == 1


def test_weighted_nll_grad_matches_fd():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    w = nn.ClassWeights(1.3, 2.9)
    g = nn.weighted_nll_grad_logits(nn.softmax(z), y, w)
    h = 1e-6
    for i in range(5):
        for j in range(2):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (nn.weighted_nll(nn.softmax(zp), y, w) - nn.weighted_nll(nn.softmax(zm), y, w)) / (2 * h)
            assert g[i, j] == pytest.approx(fd, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_loss_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    p = nn.softmax(rng.normal(size=(16, 2)))
    y = rng.integers(0, 2, 16)
    w = nn.ClassWeights(*rng.uniform(0.1, 5, 2))
    scaled = nn.ClassWeights(c * w.idle, c * w.burst)
    assert nn.weighted_nll(p, y, scaled) == pytest.approx(nn.weighted_nll(p, y, w), rel=1e-12)


def test_class_weights():
    assert nn.class_weights([0, 1, 0, 1]) == nn.ClassWeights(2, 2)
    w = nn.class_weights([0] * 7 + [1] * 3)
    assert (w.idle, w.burst) == pytest.approx((1 / 0.7, 1 / 0.3))
    with pytest.raises(WeightError):
        nn.class_weights([1, 1, 1])
    assert nn.class_weights([np.array([0, 1]), np.array([0, 0])]).burst == pytest.approx(4)


def test_imbalanced_gradient_scaled_by_weight_ratio():
    # one dense layer: the rare-class frame's logit gradient is burst/idle times
    # what it would be under equal weights (after the shared normalization)
    layer = nn.Dense(3, 2, np.random.default_rng(0))
    net = nn.Network([layer])
    x = np.random.default_rng(1).normal(size=(2, 3))
    probs = net.predict(x)
    y = np.array([0, 1])
    w = nn.ClassWeights(1.25, 5.0)
    g = nn.weighted_nll_grad_logits(probs, y, w)
    g_flat = nn.weighted_nll_grad_logits(probs, y, nn.ClassWeights(1, 1))
    ratio = (g[1] / g_flat[1]) / (g[0] / g_flat[0])
    np.testing.assert_allclose(ratio, 5.0 / 1.25)


def _small_net(seed=0):
    rng = np.random.default_rng(seed)
    return nn.Network([
        nn.KernelFusion([nn.Conv1D(3, 2, k, 2, "same", rng) for k in (3, 5)]),
        nn.ReLU(),
        nn.Conv1D(4, 3, 3, 1, "same", rng),
        nn.ReLU(),
        nn.MaxPool1D(),
        nn.Flatten(),
        nn.Dense(3 * 4, 4, rng),
        nn.ReLU(),
        nn.Dense(4, 2, rng),
    ])


def test_grad_check_dense_softmax():
    net = nn.Network([nn.Dense(6, 2, np.random.default_rng(0))])
    x = np.random.default_rng(0).normal(size=(4, 6))
    r = nn.grad_check(net, x, [0, 1, 1, 0], nn.ClassWeights(1.5, 3), h=1e-5, max_params=None)
    assert r.max_rel_error < 1e-6 and r.n_checked == net.n_params


def test_grad_check_small_conv_net_all_params():
    net = _small_net()
    x = np.random.default_rng(4).normal(size=(3, 9, 3))
    r = nn.grad_check(net, x, [0, 1, 1], nn.ClassWeights(1, 2), h=1e-5, max_params=None)
    assert r.max_rel_error < 1e-4
    assert r.n_checked + r.n_skipped_kinks == net.n_params


def test_zero_input_zero_weights_finite():
    net = _small_net()
    net.set_flat(np.zeros(net.n_params))
    _, grads, probs = net.loss_and_grads(np.zeros((2, 9, 3)), [0, 1], nn.ClassWeights(1, 1))
    assert all(np.all(np.isfinite(g)) for g in grads)
    np.testing.assert_array_equal(probs, 0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_raises():
    net = nn.Network([nn.Dense(2, 2, np.random.default_rng(0))])
    with pytest.raises(NumericError):
        net.loss_and_grads(np.array([[np.inf, 1.0]]), [0], nn.ClassWeights(1, 1))


def test_flat_roundtrip():
    net = _small_net()
    flat = net.get_flat()
    net.set_flat(flat * 2)
    np.testing.assert_array_equal(net.get_flat(), flat * 2)
    with pytest.raises(DimensionError):
        net.set_flat(flat[:-1])


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    new, state = nn.adam_step(p, [np.zeros(2)], nn.AdamState.zeros_like(p))
    np.testing.assert_array_equal(new[0], p[0])
    assert state.t == 1


def test_adam_constant_gradient_step_tends_to_lr():
    g = np.array([0.3, -2.0, 1e-3])
    p = [np.zeros(3)]
    state = nn.AdamState.zeros_like(p)
    for _ in range(2000):
        prev = p[0].copy()
        p, state = nn.adam_step(p, [g], state, lr=1e-2)
    np.testing.assert_allclose(prev - p[0], 1e-2 * np.sign(g), rtol=1e-4)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = [rng.normal(size=4)]
        s = nn.AdamState.zeros_like(p)
        for _ in range(10):
            p, s = nn.adam_step(p, [rng.normal(size=4)], s)
        return p[0]
    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(NumericError):
        nn.adam_step(p, [np.array([np.nan, 0])], nn.AdamState.zeros_like(p))


def test_sgd_step():
    p = [np.ones(2)]
    assert nn.sgd_step(p, [np.array([1.0, -1.0])], lr=0.5)[0].tolist() == [0.5, 1.5]
