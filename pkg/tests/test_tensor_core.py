import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csg3dct import kernels, ops
from csg3dct import _kernels_py
from csg3dct.gradcheck import finite_diff_gradient, relative_error
from csg3dct.oracles import naive_conv3d, two_pass_layer_norm
from csg3dct.verify import PRIMITIVE_CASES, primitive_gradient_error
from csg3dct.tensor import (OpCounter, ShapeError, Tensor, count_ops, debug_mode, default_dtype, no_grad)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv3d

def test_conv3d_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 1, 3, 4, 5)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(ops.conv3d(x, w).data, x.data)


def test_conv3d_all_ones_sums_27():
    out = ops.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 27.0


def test_conv3d_matches_nested_loop_oracle(rng):
    x = rng.normal(size=(1, 2, 4, 5, 5)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32)
    out = ops.conv3d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out, naive_conv3d(x, w), atol=1e-5)


SWEEP = [
    # (N, C, T, H, W), (Co, kt, kh, kw), stride, padding
    ((1, 1, 5, 6, 7), (2, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((2, 3, 4, 8, 8), (4, 1, 3, 3), (1, 2, 2), (0, 1, 1)),
    ((1, 2, 8, 9, 9), (3, 3, 5, 5), (1, 2, 2), (1, 2, 2)),
    ((3, 2, 2, 4, 4), (2, 1, 1, 1), (1, 1, 1), (0, 0, 0)),
    ((1, 4, 6, 10, 10), (2, 3, 1, 3), (2, 3, 1), (1, 0, 1)),
    ((2, 1, 1, 16, 16), (2, 1, 4, 4), (1, 4, 4), (0, 0, 0)),
]


@pytest.mark.parametrize("xs, ks, stride, pad", SWEEP)
def test_conv3d_oracle_sweep_and_op_count(rng, xs, ks, stride, pad):
    assert np.prod(xs) <= 10_000
    x = rng.normal(size=xs)
    w = rng.normal(size=(ks[0], xs[1]) + ks[1:])
    b = rng.normal(size=ks[0])
    with count_ops() as c:
        out = ops.conv3d(T(x), T(w), T(b), stride, pad)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, stride, pad), atol=1e-5)
    kernel_volume = ks[1] * ks[2] * ks[3]
    assert c.multiply_adds == 2 * out.data.size * kernel_volume * xs[1]


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), t=st.integers(1, 5), h=st.integers(1, 7),
       co=st.integers(1, 3), kt=st.integers(1, 3), kh=st.integers(1, 3), s=st.integers(1, 2),
       p=st.integers(0, 1), seed=st.integers(0, 2 ** 16))
def test_conv3d_oracle_property(n, c, t, h, co, kt, kh, s, p, seed):
    if t + 2 * p < kt or h + 2 * p < kh:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, t, h, h))
    w = r.normal(size=(co, c, kt, kh, kh))
    out = ops.conv3d(T(x), T(w), stride=(1, s, s), padding=p)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, None, (1, s, s), (p, p, p)), atol=1e-5)


def test_conv3d_temporal_length_formula(rng):
    x = T(rng.normal(size=(1, 1, 8, 5, 5)))
    for t, pt, st_ in ((3, 1, 1), (3, 0, 1), (5, 2, 1), (3, 1, 2)):
        out = ops.conv3d(x, T(np.ones((1, 1, t, 1, 1))), stride=(st_, 1, 1), padding=(pt, 0, 0))
        assert out.shape[2] == (8 + 2 * pt - t) // st_ + 1


def test_conv3d_shape_errors_name_the_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        ops.conv3d(T(np.zeros((1, 2, 3, 3, 3))), T(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ShapeError, match="axis 2"):
        ops.conv3d(T(np.zeros((1, 1, 2, 3, 3))), T(np.zeros((1, 1, 3, 1, 1))))


def test_compiled_and_numpy_kernels_agree(rng):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    from csg3dct import _kernels

    for dtype in (np.float32, np.float64):
        xp = np.ascontiguousarray(rng.normal(size=(2, 3, 6, 9, 8)).astype(dtype))
        args = (3, 3, 2, 1, 2, 2)
        c1, c2 = _kernels.im2col3d(xp, *args), _kernels_py.im2col3d(xp, *args)
        np.testing.assert_array_equal(c1, c2)
        g = np.ascontiguousarray(rng.normal(size=c1.shape).astype(dtype))
        np.testing.assert_allclose(_kernels.col2im3d(g, xp.shape, *args),
                                   _kernels_py.col2im3d(g, xp.shape, *args), rtol=1e-5, atol=1e-5)
        m1, i1 = _kernels.maxpool3d_forward(xp, *args)
        m2, i2 = _kernels_py.maxpool3d_forward(xp, *args)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(i1, i2)
        gm = np.ascontiguousarray(rng.normal(size=m1.shape).astype(dtype))
        np.testing.assert_allclose(_kernels.maxpool3d_backward(gm, i1, xp.shape, *args),
                                   _kernels_py.maxpool3d_backward(gm, i2, xp.shape, *args), atol=1e-6)


def test_backend_switch_gives_same_conv_and_grads(rng):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    x0, w0 = rng.normal(size=(2, 3, 5, 7, 7)), rng.normal(size=(4, 3, 3, 3, 3))

    def run():
        x, w = T(x0, grad=True), T(w0, grad=True)
        y = ops.max_pool3d(ops.conv3d(x, w, stride=(1, 2, 2), padding=(1, 1, 1)), 2, 2)
        ops.sum(ops.mul(y, y)).backward()
        return y.data, x.grad, w.grad

    ref = run()
    previous = kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
        got = run()
    finally:
        kernels.use_backend(previous)
    for a, b in zip(ref, got):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


# ---------------------------------------------------------------- softmax / layer norm

def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(T([1.0, 0.0])).data, [0.73106, 0.26894], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(xs, c):
    x = np.array(xs)
    p = ops.softmax(T(x)).data
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(ops.softmax(T(x + c)).data, p, rtol=1e-9, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = ops.softmax(Tensor(np.array([1e4, 0.0, -1e4], np.float32))).data
    assert np.all(np.isfinite(p))
    assert p[0] == 1.0


def test_layer_norm_examples(rng):
    np.testing.assert_array_equal(ops.layer_norm(T(np.full((1, 5), 3.0))).data, 0.0)
    np.testing.assert_allclose(ops.layer_norm(T([[1.0, -1.0]]), eps=1e-12).data, [[1.0, -1.0]], atol=1e-9)
    x = rng.normal(size=(4, 7))
    np.testing.assert_allclose(ops.layer_norm(T(x)).data, two_pass_layer_norm(x), atol=1e-6)


def test_layer_norm_standardises_rows(rng):
    x = rng.normal(3.0, 5.0, size=(6, 16))
    y = ops.layer_norm(T(x), T(np.ones(16)), T(np.zeros(16)), eps=1e-8).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- other primitives

def test_matmul_identity(rng):
    a = T(rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(ops.matmul(T(np.eye(4)), a).data, a.data)


def test_cross_entropy_one_hot_prediction_has_zero_loss_and_grad():
    logits = T([[1000.0, 0.0], [0.0, 1000.0]], grad=True)
    loss = ops.cross_entropy(logits, [0, 1])
    loss.backward()
    assert loss.item() == 0.0
    np.testing.assert_array_equal(logits.grad, 0.0)


def test_gelu_zero_and_monotone_above_its_minimum():
    assert ops.gelu(T([0.0])).data.item() == 0.0
    # erf-GELU has its global minimum at x ~= -0.7518; it is increasing above and decreasing below
    up = np.linspace(-0.75, 5.0, 500)
    down = np.linspace(-5.0, -0.76, 500)
    assert np.all(np.diff(ops.gelu(T(up)).data) > 0)
    assert np.all(np.diff(ops.gelu(T(down)).data) < 0)


def test_batch_norm_running_stats_and_eval(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 2, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    ops.batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), rm, rv, training=True)
    m = x.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4)) * m / (m - 1))
    y = ops.batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), rm, rv, training=False).data
    expected = (x - rm.reshape(1, 3, 1, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1, 1) + 1e-5)
    np.testing.assert_allclose(y, expected)


def test_max_and_avg_pool_values():
    x = T(np.arange(16.0).reshape(1, 1, 1, 4, 4))
    np.testing.assert_array_equal(ops.max_pool3d(x, (1, 2, 2)).data.ravel(), [5, 7, 13, 15])
    np.testing.assert_array_equal(ops.avg_pool3d(x, (1, 2, 2)).data.ravel(), [2.5, 4.5, 10.5, 12.5])


def test_upsample_nearest_repeats():
    x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2))
    y = ops.upsample_nearest3d(x, (1, 2, 2)).data[0, 0, 0]
    np.testing.assert_array_equal(y[:2, :2], 1.0)
    np.testing.assert_array_equal(y[2:, 2:], 4.0)


def test_matmul_and_linear_shape_errors():
    with pytest.raises(ShapeError):
        ops.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ops.linear(T(np.zeros((2, 3))), T(np.zeros((4, 5))))


# ---------------------------------------------------------------- backward

def test_backward_square_sum(rng):
    x = T(rng.normal(size=(3, 4)), grad=True)
    ops.sum(ops.square(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_sum_of_softmax_is_zero(rng):
    x = T(rng.normal(size=(3, 5)), grad=True)
    ops.sum(ops.softmax(x, axis=-1)).backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ShapeError):
        ops.mul(x, 2.0).backward()


def test_backward_releases_tape(rng):
    x = T(rng.normal(size=3), grad=True)
    y = ops.sum(ops.square(x))
    y.backward()
    assert y._parents == () and y._backward is None


def test_two_layer_perceptron_matches_finite_differences(rng):
    x = T(rng.normal(size=(5, 4)))
    w1, b1 = T(rng.normal(size=(6, 4)), True), T(rng.normal(size=6), True)
    w2, b2 = T(rng.normal(size=(3, 6)), True), T(rng.normal(size=3), True)
    y = np.array([0, 2, 1, 1, 0])

    def loss():
        return ops.cross_entropy(ops.linear(ops.gelu(ops.linear(x, w1, b1)), w2, b2), y)

    loss().backward()
    for p in (w1, b1, w2, b2):
        numeric = finite_diff_gradient(lambda _: loss(), p, step=1e-5)
        assert relative_error(p.grad, numeric) < 1e-4


def test_finite_diff_examples(rng):
    x = T(rng.normal(size=(2, 3)))
    np.testing.assert_allclose(finite_diff_gradient(lambda t: ops.sum(t), x, 1e-5), 1.0, atol=1e-9)
    np.testing.assert_allclose(finite_diff_gradient(lambda t: ops.sum(ops.square(t)), T([1.0, 2.0]), 1e-5),
                               [2.0, 4.0], atol=1e-6)
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda t: ops.sum(t), x, 0.0)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients_match_finite_differences(name, seed):
    assert primitive_gradient_error(name, seed) < 1e-4


# ---------------------------------------------------------------- counters, determinism, debug

def test_op_counter_monotone_within_forward(rng):
    counter = OpCounter()
    history = []
    with count_ops() as c:
        x = T(rng.normal(size=(1, 2, 3, 6, 6)))
        for _ in range(3):
            x = ops.conv3d(x, T(rng.normal(size=(2, 2, 1, 3, 3))), padding=(0, 1, 1))
            history.append(c.multiply_adds)
    assert history == sorted(history) and history[0] > 0
    with pytest.raises(ValueError):
        counter.add("x", -1)


def test_forward_backward_bitwise_deterministic():
    def run():
        r = np.random.default_rng(3)
        x = Tensor(r.normal(size=(2, 2, 3, 6, 6)).astype(np.float32))
        w = Tensor(r.normal(size=(3, 2, 3, 3, 3)).astype(np.float32), requires_grad=True)
        y = ops.conv3d(x, w, padding=1)
        loss = ops.sum(ops.square(ops.gelu(y)))
        loss.backward()
        return y.data.copy(), w.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


def test_debug_mode_traps_non_finite():
    x = T([1.0, 0.0])
    with debug_mode(True):
        with pytest.raises(FloatingPointError):
            ops.div(x, T([0.0, 0.0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ops.div(x, T([0.0, 0.0]))


def test_no_grad_skips_tape(rng):
    w = T(rng.normal(size=3), grad=True)
    with no_grad():
        y = ops.mul(w, 2.0)
    assert not y.requires_grad


def test_dtype_follows_inputs():
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    assert ops.gelu(Tensor(np.ones(2, np.float32))).dtype == np.float32
