import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from illumseg import tensor as T
from illumseg.gradcheck import check_composite, check_ops, grad_check
from illumseg.optim import rmsprop_step


def conv_oracle(x, w, b):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    out = np.zeros((cout, h - k + 1, wd - k + 1))
    for o in range(cout):
        for y in range(h - k + 1):
            for xx in range(wd - k + 1):
                acc = b[o]
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            acc += x[c, y + i, xx + j] * w[o, c, i, j]
                out[o, y, xx] = acc
    return out


# ------------------------------------------------------------------ conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).uniform(0, 5, (1, 4, 5)).astype(np.float32)
    out = T.conv2d_valid(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_through_averaging_kernel():
    x = np.full((1, 6, 6), 7.0)
    out = T.conv2d_valid(x, np.full((1, 1, 3, 3), 1 / 9), np.zeros(1))
    np.testing.assert_allclose(out.data, 7.0, rtol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_nested_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    with T.precision(np.float64):
        out = T.conv2d_valid(x, w, b).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-6)


def test_fft_route_matches_oracle():
    rng = np.random.default_rng(3)
    k = T.FFT_KERNEL_MIN + 2
    x = rng.standard_normal((2, k + 4, k + 6))
    w = rng.standard_normal((1, 2, k, k))
    with T.precision(np.float64):
        out = T.conv2d_valid(x, w, np.zeros(1)).data
    np.testing.assert_allclose(out, conv_oracle(x, w, np.zeros(1)), atol=1e-9)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 6, 7)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    batched = T.conv2d_valid(x, w).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d_valid(x[n], w).data, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("kernels, msg", [
    (np.ones((1, 1, 2, 2)), "odd"),
    (np.ones((1, 2, 3, 3)), "channel"),
    (np.ones((1, 1, 7, 7)), "larger"),
])
def test_conv_errors(kernels, msg):
    with pytest.raises(ValueError, match=msg):
        T.conv2d_valid(np.ones((1, 5, 5)), kernels)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5, 9, 11]), cin=st.integers(1, 3))
def test_shape_algebra_conv(h, w, k, cin):
    if k > min(h, w):
        return
    out = T.conv2d_valid(np.zeros((cin, h, w)), np.zeros((2, cin, k, k)))
    assert out.shape == (2, h - k + 1, w - k + 1)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 4), h=st.integers(1, 8), w=st.integers(1, 8))
def test_shape_algebra_pool_and_upsample(c, h, w):
    x = np.zeros((c, 2 * h, 2 * w))
    assert T.maxpool2(x).shape == (c, h, w)
    assert T.upsample2(np.zeros((c, h, w))).shape == (c, 2 * h, 2 * w)


# ------------------------------------------------------------- pool/upsample


def test_maxpool_block_max():
    out = T.maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_constant():
    np.testing.assert_array_equal(T.maxpool2(np.full((2, 4, 6), 3.0)).data, np.full((2, 2, 3), 3.0))


def test_maxpool_matches_blockwise_scan():
    x = np.random.default_rng(2).standard_normal((1, 8, 8)).astype(np.float32)
    expected = np.empty((1, 4, 4), dtype=np.float32)
    for i in range(4):
        for j in range(4):
            expected[0, i, j] = max(x[0, 2 * i + a, 2 * j + b] for a in range(2) for b in range(2))
    np.testing.assert_array_equal(T.maxpool2(x).data, expected)


def test_maxpool_tie_routes_to_first():
    x = T.Tensor(np.full((1, 2, 2), 5.0), requires_grad=True)
    T.backward(T.sum_all(T.maxpool2(x)))
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_maxpool_odd_dims():
    with pytest.raises(ValueError):
        T.maxpool2(np.zeros((1, 3, 4)))


def test_upsample_duplicates():
    assert T.upsample2(np.array([[[5.0]]])).data.tolist() == [[[5.0, 5.0], [5.0, 5.0]]]
    assert T.upsample2(np.zeros((3, 4, 6))).shape == (3, 8, 12)


def test_upsample_grad_is_four():
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 3)), requires_grad=True)
    T.backward(T.sum_all(T.upsample2(x)))
    np.testing.assert_array_equal(x.grad, 4.0)


# ------------------------------------------------------------------ concat


def test_concat_full_scale_channel_count():
    a, b = np.zeros((512, 2, 3)), np.ones((512, 2, 3))
    assert T.concat_channels(a, b).shape == (1024, 2, 3)


def test_concat_slices_recover_inputs():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    b = rng.standard_normal((3, 3, 4)).astype(np.float32)
    out = T.concat_channels(a, b).data
    np.testing.assert_array_equal(out[:2], a)
    np.testing.assert_array_equal(out[2:], b)


def test_concat_errors():
    with pytest.raises(ValueError):
        T.concat_channels(np.zeros((1, 2, 2)), np.zeros((0, 2, 2)))
    with pytest.raises(ValueError):
        T.concat_channels(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# -------------------------------------------------------------- elementwise


def test_elementwise_values():
    assert T.log1p_pos(np.array(0.0)).item() == 0.0
    np.testing.assert_array_equal(T.relu(np.array([-3.0, 3.0])).data, [0.0, 3.0])
    with pytest.raises(ValueError):
        T.log1p_pos(np.array([-1.0]))


def test_non_finite_is_hard_error():
    with pytest.raises(T.NonFiniteError):
        T.Tensor(np.array([np.nan]))
    with pytest.raises(T.NonFiniteError):
        T.scale(np.array([3e38], dtype=np.float32), 10.0)


def test_tensor_rank_limit():
    with pytest.raises(ValueError):
        T.Tensor(np.zeros((1, 1, 1, 1, 1)))


# --------------------------------------------------------------------- bce


def test_bce_ln2():
    loss = T.bce_with_logits(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_saturation():
    assert T.bce_with_logits(np.full((1, 1, 1), 20.0), np.ones((1, 1, 1))).item() <= 1e-8


def test_bce_grad_at_zero():
    n = 6
    z = T.Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    T.backward(T.bce_with_logits(z, np.ones((1, 2, 3))))
    np.testing.assert_allclose(z.grad, -0.5 / n, rtol=1e-6)


def test_bce_rejects_non_binary():
    with pytest.raises(ValueError):
        T.bce_with_logits(np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = T.Parameter(np.random.default_rng(0).standard_normal((2, 3)))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_disconnected_param_grad_stays_zero():
    x, y = T.Parameter(np.ones(3)), T.Parameter(np.ones(3))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(y.grad, 0.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(T.Parameter(np.ones(3)) * 2)


def test_repeated_backward_accumulates():
    x = T.Parameter(np.ones(3))
    T.backward(T.sum_all(T.scale(x, 2.0)))
    T.backward(T.sum_all(T.scale(x, 2.0)))
    np.testing.assert_array_equal(x.grad, 4.0)


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))

    def loss_a(p):
        return T.sum_all(T.relu(T.conv2d_valid(p, w)))

    def loss_b(p):
        return T.mean_all(T.mul(p, p))

    with T.precision(np.float64):
        p1 = T.Parameter(data)
        T.backward(T.add(loss_a(p1), loss_b(p1)))
        p2 = T.Parameter(data)
        T.backward(loss_a(p2))
        T.backward(loss_b(p2))
    np.testing.assert_allclose(p1.grad, p2.grad, rtol=1e-12)


def test_reused_node_visited_once():
    x = T.Parameter(np.array([2.0]))
    y = T.mul(x, x)  # shared parent on both sides
    T.backward(T.sum_all(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_determinism_forward_and_grads():
    def run():
        rng = np.random.default_rng(9)
        w = T.Parameter(rng.standard_normal((2, 3, 3, 3)))
        out = T.relu(T.conv2d_valid(rng.standard_normal((2, 3, 6, 6)), w))
        T.backward(T.mean_all(out))
        return out.data, w.grad

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()


def test_no_grad_records_nothing():
    p = T.Parameter(np.ones(2))
    with T.no_grad():
        out = T.scale(p, 2.0)
    assert not out.requires_grad


# ----------------------------------------------------------------- rmsprop


def test_rmsprop_zero_grad_no_change():
    p = T.Parameter(np.array([1.0, -2.0]))
    before = p.data.copy()
    rmsprop_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_rmsprop_hand_evaluation():
    with T.precision(np.float64):
        p = T.Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    rmsprop_step([p], lr=1e-4, decay=0.99, eps=1e-8)
    # s = 0.01, step = 1e-4 * 1 / (0.1 + 1e-8)
    assert p.data[0] == pytest.approx(0.999, abs=1e-9)
    assert p.rms_state[0] == pytest.approx(0.01)
    np.testing.assert_array_equal(p.grad, 0.0)


def test_rmsprop_deterministic():
    def run():
        p = T.Parameter(np.linspace(-1, 1, 5))
        p.grad = np.linspace(0.3, -0.7, 5).astype(np.float32)
        rmsprop_step([p], lr=1e-3)
        return p.data.tobytes()

    assert run() == run()


def test_rmsprop_state_nonnegative():
    p = T.Parameter(np.zeros(4))
    for g in ([1, -2, 3, -4], [-5, 0, 0, 1]):
        p.grad = np.array(g, dtype=np.float32)
        rmsprop_step([p], lr=1e-2)
    assert (p.rms_state >= 0).all()


def test_rmsprop_requires_grads():
    p = T.Parameter(np.zeros(2))
    p.grad = None
    with pytest.raises(ValueError):
        rmsprop_step([p], lr=1.0)


# --------------------------------------------------------------- gradcheck


def test_gradcheck_linear_op_tight():
    x = np.random.default_rng(0).standard_normal((2, 3, 3))
    assert grad_check(lambda t: T.scale(t, 3.0), [x], eps=1e-2) <= 1e-9


def test_gradcheck_conv():
    rng = np.random.default_rng(4)
    err = grad_check(T.conv2d_valid, [rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 2, 3, 3)),
                                      rng.standard_normal(2)])
    assert err <= 1e-3


def test_gradcheck_relu_off_kink():
    x = np.random.default_rng(1).standard_normal((1, 4, 4))
    x = np.where(np.abs(x) < 1e-4, 0.5, x)
    assert grad_check(T.relu, [x]) <= 1e-3


def test_gradcheck_detects_wrong_backward(monkeypatch):
    real = T._conv_im2col_backward

    def flipped(*args):
        gx, gw = real(*args)
        return (None if gx is None else -gx), (None if gw is None else -gw)

    monkeypatch.setattr(T, "_conv_im2col_backward", flipped)
    [result] = check_ops(seeds=2, names={"conv2d_valid"})
    assert not result.passed


def test_every_op_passes_gradcheck_over_seeds():
    results = check_ops(seeds=20) + [check_composite(seeds=20)]
    failed = [(r.name, r.max_rel_err) for r in results if not r.passed]
    assert not failed
