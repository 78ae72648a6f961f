import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viba import tensor as T
from viba.tensor import Tape, Tensor, gradient_check

from oracles import conv2d_loops, depthwise_loops, linear_loops, max_pool_loops


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# --- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_counting_kernel():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_loops():
    rng = np.random.default_rng(1)
    x, w = rand(rng, 2, 3, 8, 8), rand(rng, 4, 3, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, 1, 1), atol=1e-5)


def test_conv_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 8), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv_loops_property(n, c, o, hw, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, w = rand(rng, n, c, hw, hw), rand(rng, o, c, k, k)
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, stride, pad), atol=1e-5)


# --- separable ---------------------------------------------------------------

def test_separable_identity():
    rng = np.random.default_rng(2)
    x = rand(rng, 1, 3, 5, 5)
    dw = np.zeros((3, 1, 3, 3), np.float32)
    dw[:, 0, 1, 1] = 1
    pw = np.eye(3, dtype=np.float32)[:, :, None, None]
    out = T.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw))
    np.testing.assert_array_equal(out.data, x)


def test_separable_channel_sum_linearity():
    rng = np.random.default_rng(3)
    x, dw = rand(rng, 1, 2, 4, 4), rand(rng, 2, 1, 3, 3)
    pw = np.ones((1, 2, 1, 1), np.float32)
    mid = T.depthwise_conv2d(Tensor(x), Tensor(dw), padding=1).data
    out = T.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw))
    np.testing.assert_allclose(out.data[:, 0], mid.sum(axis=1), atol=1e-6)


def test_separable_matches_two_stage_oracle():
    rng = np.random.default_rng(4)
    x, dw, pw = rand(rng, 1, 3, 6, 6), rand(rng, 3, 1, 3, 3), rand(rng, 5, 3, 1, 1)
    out = T.separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw))
    expected = conv2d_loops(depthwise_loops(x, dw, 1), pw, 1, 0)
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_depthwise_group_mismatch():
    with pytest.raises(ValueError, match="groups"):
        T.depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))))


# --- batch norm ------------------------------------------------------------------

def test_batch_norm_inference_near_identity():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 4, 3, 3)
    ones, zeros = np.ones(4, np.float32), np.zeros(4, np.float32)
    out = T.batch_norm2d(Tensor(x), Tensor(ones), Tensor(zeros), zeros.copy(), ones.copy(), eps=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_batch_norm_constant_training_gives_beta():
    x = np.broadcast_to(np.array([1.0, -2.0, 3.0], np.float32)[None, :, None, None], (2, 3, 4, 4)).copy()
    beta = np.array([0.5, 0.25, -1.0], np.float32)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = T.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(beta), rm, rv, training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-6)
    np.testing.assert_allclose(rm, 0.1 * np.array([1.0, -2.0, 3.0]), atol=1e-7)


def test_batch_norm_inference_scalar_oracle():
    rng = np.random.default_rng(6)
    x = rand(rng, 2, 4, 3, 3)
    g, b = rand(rng, 4), rand(rng, 4)
    rm, rv = rand(rng, 4), (rng.random(4) + 0.5).astype(np.float32)
    out = T.batch_norm2d(Tensor(x), Tensor(g), Tensor(b), rm, rv, eps=1e-5).data
    for idx in np.ndindex(x.shape):
        c = idx[1]
        ref = float(g[c]) * (float(x[idx]) - float(rm[c])) / np.sqrt(float(rv[c]) + 1e-5) + float(b[c])
        assert abs(out[idx] - ref) < 1e-6 * max(1, abs(ref))


def test_batch_norm_rejects_bad_eps():
    z = np.zeros(1, np.float32)
    with pytest.raises(ValueError):
        T.batch_norm2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(z), Tensor(z), z, z + 1, eps=0)


# --- relu / pool / linear ---------------------------------------------------------

def test_relu_values_and_gradient():
    out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0, 0, 2])
    x = Tensor(-np.ones(5, np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.relu(x))
    np.testing.assert_array_equal(loss.data, 0)
    np.testing.assert_array_equal(tape.backward(loss)[x.id], np.zeros(5))


@given(st.integers(0, 2**31 - 1))
def test_relu_idempotent(seed):
    x = Tensor(rand(np.random.default_rng(seed), 3, 4))
    np.testing.assert_array_equal(T.relu(T.relu(x)).data, T.relu(x).data)


def test_max_pool_constant_and_peak():
    out = T.max_pool2d(Tensor(np.full((1, 1, 6, 6), 2.0)))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, 2.0)
    x = np.zeros((1, 1, 4, 4), np.float32)
    x[0, 0, 1, 2] = 9
    out = T.max_pool2d(Tensor(x)).data[0, 0]
    # windows of rows {-1..1},{1..3} and cols {1..3} contain (1, 2)
    expected = np.zeros((2, 2))
    expected[0, 1] = expected[1, 1] = 9
    np.testing.assert_array_equal(out, expected)


def test_max_pool_matches_window_scan():
    rng = np.random.default_rng(7)
    x = rand(rng, 1, 2, 7, 7)
    np.testing.assert_array_equal(T.max_pool2d(Tensor(x)).data, max_pool_loops(x).astype(np.float32))


def test_max_pool_tie_routes_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.max_pool2d(x, kernel=2, stride=2, padding=0))
    np.testing.assert_array_equal(tape.backward(loss)[x.id][0, 0], [[1, 0], [0, 0]])


def test_max_pool_kernel_too_large():
    with pytest.raises(ValueError):
        T.max_pool2d(Tensor(np.zeros((1, 1, 1, 1))), kernel=5, stride=1, padding=1)


def test_linear_identity_and_bias():
    rng = np.random.default_rng(8)
    x = rand(rng, 3, 4)
    out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)
    b = np.array([1.0, -2.0], np.float32)
    out = T.linear(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_linear_matches_sums():
    rng = np.random.default_rng(9)
    x, w, b = rand(rng, 3, 5), rand(rng, 5, 2), rand(rng, 2)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, linear_loops(x, w, b), atol=1e-6)


def test_linear_mismatch():
    with pytest.raises(ValueError, match="inner dimension"):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


# --- cross entropy ------------------------------------------------------------------

def test_cross_entropy_uniform_and_confident():
    assert abs(float(T.softmax_cross_entropy(Tensor(np.zeros((3, 2))), [0, 1, 0]).data) - np.log(2)) < 1e-7
    assert float(T.softmax_cross_entropy(Tensor(np.array([[100.0, 0.0]])), [0]).data) < 1e-6


def test_cross_entropy_high_precision_oracle():
    rng = np.random.default_rng(10)
    logits = rand(rng, 4, 3) * 3
    labels = [0, 2, 1, 2]
    mpmath.mp.dps = 50
    ref = 0
    for row, lab in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        ref += mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z)) - z[lab]
    ref = float(ref / 4)
    assert abs(float(T.softmax_cross_entropy(Tensor(logits), labels).data) - ref) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [2])


# --- tape ------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(x)
    np.testing.assert_array_equal(T.backward(tape, loss)[x.id], np.ones((2, 3)))


def test_unused_input_gets_zero_gradient():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    y = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as tape:
        tape.watch(x)
        loss = T.sum(y)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x.id], np.zeros(3))


def test_tape_single_use_and_scalar_loss():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
        loss = T.sum(y)
    with pytest.raises(ValueError):
        Tape().backward(y)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_non_finite_forward_is_an_error():
    with pytest.raises(FloatingPointError):
        T.relu(Tensor(np.array([np.inf])))


def _composite_graph(rng):
    w = Tensor(rand(rng, 2, 2, 3, 3))
    lw, lb = Tensor(rand(rng, 2 * 4 * 4, 3)), Tensor(rand(rng, 3))

    def build(x):
        h = T.relu(T.conv2d(x, w, padding=1))
        return T.softmax_cross_entropy(T.linear(T.flatten(h), lw, lb), [0, 2])

    return build


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(11)
    build = _composite_graph(rng)
    assert gradient_check(build, rand(rng, 2, 2, 4, 4), h=1e-3) < 1e-3


def test_gradient_check_linear_relu_constant():
    rng = np.random.default_rng(12)
    w, b = Tensor(rand(rng, 4, 3)), Tensor(rand(rng, 3))
    assert gradient_check(lambda x: T.sum(T.linear(x, w, b)), rand(rng, 2, 4)) < 1e-3
    x = rand(rng, 10)
    x[np.abs(x) < 0.1] = 0.5
    assert gradient_check(lambda t: T.sum(T.relu(t)), x) < 1e-3
    assert gradient_check(lambda t: T.scale(T.sum(t), 0.0), x) == 0.0


def test_gradient_check_rejects_bad_step_and_nondeterminism():
    with pytest.raises(ValueError):
        gradient_check(lambda t: T.sum(t), np.ones(2), h=1.0)
    rng = np.random.default_rng(0)

    def noisy(t):
        return T.sum(T.add(t, Tensor(rng.standard_normal(t.shape))))

    with pytest.raises(RuntimeError):
        gradient_check(noisy, np.ones(3))


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(13)
        build = _composite_graph(rng)
        x = Tensor(rand(rng, 2, 2, 4, 4), requires_grad=True)
        with Tape() as tape:
            loss = build(x)
        return loss.data, tape.backward(loss)[x.id]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_float64_accumulation_for_long_dot_products():
    rng = np.random.default_rng(14)
    x, w = rand(rng, 2, 5000), rand(rng, 5000, 1)
    out = T.linear(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    ref = x.astype(np.float64) @ w.astype(np.float64)
    np.testing.assert_allclose(out.data, ref, rtol=1e-6)
