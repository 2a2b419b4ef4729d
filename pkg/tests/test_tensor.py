import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionssm import tensor as T
from motionssm.tensor import (
    GraphError, ShapeError, Tensor, backward, concat, grad_check,
    primitive_forward, reverse, slice_axis,
)


def matmul_oracle(a, b):
    """Independent triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


class TestForward:
    def test_matmul_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        eye = Tensor(np.eye(2, dtype=np.float32))
        assert np.array_equal((eye @ a).numpy(), a.numpy())

    def test_matmul_hand_value(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        got = (Tensor(a) @ Tensor(b)).numpy()
        assert np.array_equal(got, [[19.0, 22.0], [43.0, 50.0]])
        assert np.array_equal(got, matmul_oracle(a, b))

    def test_matmul_random_vs_oracle(self, f64):
        rng = np.random.default_rng(3)
        for n, k, m in [(1, 1, 1), (2, 3, 4), (5, 2, 5)]:
            a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
            got = (Tensor(a) @ Tensor(b)).numpy()
            np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-12)

    def test_relu_definition(self):
        got = T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).numpy()
        assert np.array_equal(got, [0.0, 0.0, 2.0])

    def test_shape_error_names_op_and_dims(self):
        with pytest.raises(ShapeError, match="matmul.*3.*2"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_checked_mode_rejects_nonfinite(self):
        bad = Tensor(np.array([1.0, np.nan]))
        with T.checked_mode():
            with pytest.raises(FloatingPointError, match="add"):
                bad + bad
        _ = bad + bad  # fine when unchecked

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            primitive_forward("div", [Tensor(np.ones(2))])

    def test_primitive_forward_dispatch(self):
        out = primitive_forward("mul", [np.array([2.0, 3.0]), np.array([4.0, 5.0])])
        assert np.array_equal(out.numpy(), [8.0, 15.0])

    def test_forward_deterministic_bitwise(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(6, 6)).astype(np.float32))
        w = Tensor(rng.normal(size=(6, 6)).astype(np.float32))

        def run():
            return T.silu(T.sigmoid(x @ w) + T.exp(x * 0.1)).numpy()

        assert np.array_equal(run(), run())

    def test_suffix_broadcast_ok_interior_rejected(self):
        a = Tensor(np.ones((4, 3)))
        assert (a + Tensor(np.ones(3))).shape == (4, 3)
        assert (a * 2.0).shape == (4, 3)
        with pytest.raises(ShapeError):
            a + Tensor(np.ones((4, 1)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(TypeError, match="mixed dtypes"):
            Tensor(np.ones(2), dtype=np.float32) + Tensor(np.ones(2), dtype=np.float64)


class TestBackward:
    def test_square_gradient(self, f64):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = T.square(x)
        y.backward()
        assert x.grad == pytest.approx(6.0)

    def test_scalar_wrt_itself_is_one(self, f64):
        x = Tensor(np.array(5.0), requires_grad=True)
        y = x * 1.0
        y.backward()
        assert y.grad == pytest.approx(1.0)

    def test_sigmoid_chain_matches_finite_differences(self, f64):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(scale=0.5, size=(4, 3)))
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        err = grad_check(lambda t: T.sigmoid(w @ t).sum(), x)
        assert err < 1e-4

    def test_unreachable_leaf_gets_zero_grad(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        _ = x * 2.0  # recorded but never consumed by the root
        loss = y.sum()
        loss.backward()
        assert np.array_equal(x.grad, np.zeros(3))
        assert np.array_equal(y.grad, np.ones(3))

    def test_nonscalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            backward(x * 2.0)

    def test_unrecorded_root_rejected(self):
        with pytest.raises(GraphError, match="not recorded"):
            backward(Tensor(np.array(1.0)))
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x * 2.0
        T.reset_tape()
        with pytest.raises(GraphError, match="not recorded"):
            backward(y)

    def test_grad_accumulates_across_backwards(self, f64):
        x = Tensor(np.array(2.0), requires_grad=True)
        (x * 3.0).backward()
        (x * 4.0).backward()
        assert x.grad == pytest.approx(7.0)

    def test_fanout_accumulation(self, f64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.numpy() + 3.0)


class TestGradCheck:
    def test_linear_function_near_exact(self, f64):
        x = Tensor(np.linspace(-1, 1, 7), requires_grad=True)
        assert grad_check(lambda t: t.sum(), x) < 1e-10

    def test_requires_float64(self):
        x = Tensor(np.ones(2), requires_grad=True, dtype=np.float32)
        with pytest.raises(TypeError, match="float64"):
            grad_check(lambda t: t.sum(), x)

    def test_max_components_subsample(self, f64):
        x = Tensor(np.random.default_rng(0).normal(size=100), requires_grad=True)
        assert grad_check(lambda t: T.square(t).sum(), x, max_components=10) < 1e-6

    def test_propagates_evaluation_failure(self, f64):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with pytest.raises(ShapeError):
            grad_check(lambda t: (t @ t).sum(), x)


# every primitive, random inputs at each supported rank, rel err < 1e-4 at 64-bit
_UNARY_SAFE = ["exp", "log", "sigmoid", "silu", "softplus", "square", "relu"]


@pytest.mark.parametrize("op", _UNARY_SAFE)
@pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4)])
def test_unary_primitive_gradients(op, shape, f64):
    rng = np.random.default_rng(hash((op, shape)) % 2**32)
    data = rng.uniform(0.5, 2.0, size=shape) if op == "log" else rng.normal(size=shape)
    if op == "relu":
        data = data + np.sign(data) * 0.05  # stay clear of the kink
    x = Tensor(data, requires_grad=True)
    err = grad_check(lambda t: primitive_forward(op, [t]).sum(), x, eps=1e-6)
    assert err < 1e-4, f"{op} at {shape}: {err}"


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
@pytest.mark.parametrize("shapes", [((4,), (4,)), ((3, 4), (4,)), ((2, 3, 4), (3, 4)),
                                    ((3, 4), ())])
def test_binary_primitive_gradients(op, shapes, f64):
    rng = np.random.default_rng(hash((op,) + shapes) % 2**32)
    a = Tensor(rng.normal(size=shapes[0]), requires_grad=True)
    b = Tensor(rng.normal(size=shapes[1]))

    err_a = grad_check(lambda t: primitive_forward(op, [t, b]).sum(), a, eps=1e-6)
    assert err_a < 1e-4
    bb = Tensor(rng.normal(size=shapes[1]), requires_grad=True)
    err_b = grad_check(lambda t: primitive_forward(op, [a.detach(), t]).sum(), bb, eps=1e-6)
    assert err_b < 1e-4


@pytest.mark.parametrize("make", [
    lambda t: t.sum(axis=0),
    lambda t: t.sum(axis=(0, 2), keepdims=True),
    lambda t: t.mean(),
    lambda t: t.mean(axis=-1),
    lambda t: T.reshape(t, (6, 4)),
    lambda t: T.broadcast_to(T.reshape(t, (2, 3, 4, 1)), (5, 2, 3, 4, 6)),
    lambda t: reverse(t, axis=1),
    lambda t: slice_axis(t, axis=2, start=1, stop=4, step=2),
    lambda t: T.swap_last_axes(t),
    lambda t: concat([t, t * 2.0], axis=1),
])
def test_structural_primitive_gradients(make, f64):
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    err = grad_check(lambda t: T.square(make(t)).sum(), x, eps=1e-6)
    assert err < 1e-4


def test_batched_matmul_gradients(f64):
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)))
    assert grad_check(lambda t: (t @ b).sum(), a, eps=1e-6) < 1e-4
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert grad_check(lambda t: (a.detach() @ t).sum(), w, eps=1e-6) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2), st.integers(1, 4))
def test_concat_slice_round_trip(rows_a, rows_b, axis_choice, width):
    rng = np.random.default_rng(rows_a * 100 + rows_b * 10 + axis_choice)
    axis = axis_choice % 2
    shape_a = (rows_a, width) if axis == 0 else (width, rows_a)
    shape_b = (rows_b, width) if axis == 0 else (width, rows_b)
    a = Tensor(rng.normal(size=shape_a).astype(np.float32))
    b = Tensor(rng.normal(size=shape_b).astype(np.float32))
    joined = concat([a, b], axis=axis)
    back = slice_axis(joined, axis=axis, start=0, stop=shape_a[axis])
    assert np.array_equal(back.numpy(), a.numpy())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1))
def test_reverse_is_involution(rows, cols, axis):
    rng = np.random.default_rng(rows * 10 + cols)
    x = Tensor(rng.normal(size=(rows, cols)).astype(np.float32))
    assert np.array_equal(reverse(reverse(x, axis=axis), axis=axis).numpy(), x.numpy())


def test_default_dtype_switching():
    assert Tensor(np.ones(1)).dtype == np.float32
    with T.using_dtype(np.float64):
        assert Tensor(np.ones(1)).dtype == np.float64
    assert Tensor(np.ones(1)).dtype == np.float32
