import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from treegan.core_math import (
    Adam,
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    exp,
    grad,
    grad_check,
    leaky_relu,
    linear_forward,
    log,
    log_softmax,
    matmul,
    no_grad,
    norm,
    repeat_rows,
    sqrt,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def central_diff(f, x, eps=1e-6):
    """Independent finite-difference oracle over a plain numpy function."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


# ---------------------------------------------------------------- linear_forward

def test_linear_identity():
    y = linear_forward(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, np.eye(2))


def test_linear_hand_sum():
    y = linear_forward(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
    np.testing.assert_array_equal(y.data, [[3.5]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        linear_forward(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))
    msg = str(info.value)
    assert "(3, 4)" in msg and "(5, 2)" in msg


def test_linear_weight_grad_is_column_sums(rng):
    x = rng.standard_normal((3, 4))
    W = Parameter(rng.standard_normal((4, 2)), "W")
    b = Parameter(np.zeros(2), "b")
    (gW,) = grad(linear_forward(Tensor(x), W, b).sum(), [W])
    expected = np.repeat(x.sum(axis=0)[:, None], 2, axis=1)
    np.testing.assert_allclose(gW.data, expected, rtol=1e-12)
    fd = central_diff(lambda w: (x @ w).sum(), W.data.copy())
    assert np.max(np.abs(gW.data - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-6


def test_grad_check_linear_below_1e6(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    W = Parameter(rng.standard_normal((4, 2)), "W")
    b = Parameter(rng.standard_normal(2), "b")
    err = grad_check(lambda: (linear_forward(x, W, b) ** 2).sum(), [W, b])
    assert err < 1e-6


def test_grad_check_rejects_float32():
    W = Parameter(np.ones((2, 2), dtype=np.float32), "W")
    with pytest.raises(ContractError):
        grad_check(lambda: W.sum(), [W])


# ---------------------------------------------------------------- leaky_relu

@pytest.mark.parametrize("x, expected", [(2.0, 2.0), (-1.0, -0.2), (0.0, 0.0)])
def test_leaky_values(x, expected):
    assert leaky_relu(Tensor(np.array(x)), 0.2).item() == pytest.approx(expected, abs=1e-15)


def test_leaky_derivative_at_zero_is_one():
    x = Tensor(np.array([0.0, -0.0, -1.0, 1.0]), requires_grad=True)
    (g,) = grad(leaky_relu(x, 0.2).sum(), [x])
    np.testing.assert_array_equal(g.data, [1.0, 1.0, 0.2, 1.0])


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
def test_leaky_slope_contract(slope):
    with pytest.raises(ContractError):
        leaky_relu(Tensor(np.ones(2)), slope)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(0.01, 0.99))
def test_leaky_matches_where(x, slope):
    out = leaky_relu(Tensor(x), slope).data
    np.testing.assert_array_equal(out, np.where(x >= 0, x, slope * x))


# ---------------------------------------------------------------- backward and grad

def test_backward_rejects_non_scalar():
    W = Parameter(np.ones((2, 2)), "W")
    with pytest.raises(ContractError):
        backward(W * 2.0)


def test_grad_non_scalar_needs_grad_output():
    W = Parameter(np.ones(3), "W")
    with pytest.raises(ContractError):
        grad(W * 2.0, [W])
    (g,) = grad(W * 2.0, [W], grad_output=Tensor(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])


def test_backward_outer_structure(rng):
    x = rng.standard_normal(3)
    W = Parameter(rng.standard_normal((2, 3)), "W")
    backward(matmul(W, Tensor(x.reshape(3, 1))).sum(), [W])
    np.testing.assert_allclose(W.grad, np.tile(x, (2, 1)), rtol=1e-12)


def test_unused_parameter_gets_exact_zero(rng):
    W = Parameter(rng.standard_normal((2, 2)), "W")
    unused = Parameter(rng.standard_normal(3), "unused")
    backward((W * W).sum(), [W, unused])
    assert np.all(unused.grad == 0.0)


def test_shared_weight_sums_path_grads(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    W = Parameter(rng.standard_normal((3, 3)), "W")
    loss = (matmul(leaky_relu(matmul(x, W), 0.2), W) ** 2).sum()
    (g_shared,) = grad(loss, [W])
    # two-copy network: gradient of each copy, then summed
    W1 = Parameter(W.data.copy(), "W1")
    W2 = Parameter(W.data.copy(), "W2")
    loss2 = (matmul(leaky_relu(matmul(x, W1), 0.2), W2) ** 2).sum()
    g1, g2 = grad(loss2, [W1, W2])
    np.testing.assert_allclose(g_shared.data, g1.data + g2.data, rtol=1e-12)


def test_backward_accumulates():
    W = Parameter(np.array([1.0, 2.0]), "W")
    backward((W * 3.0).sum(), [W])
    backward((W * 3.0).sum(), [W])
    np.testing.assert_array_equal(W.grad, [6.0, 6.0])
    W.zero_grad()
    assert np.all(W.grad == 0)


def test_no_grad_records_nothing():
    W = Parameter(np.ones(2), "W")
    with no_grad():
        y = (W * 2.0).sum()
    assert y._ctx is None and not y.requires_grad


def test_double_backward_of_square():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (g,) = grad((x ** 3).sum(), [x], create_graph=True)
    (h,) = grad(g.sum(), [x])
    np.testing.assert_allclose(h.data, 6.0 * x.data, rtol=1e-12)


def test_elementwise_ops_grad_check(rng):
    a = Parameter(rng.uniform(0.5, 2.0, (3, 4)), "a")
    b = Parameter(rng.uniform(0.5, 2.0, (4,)), "b")

    def f():
        y = exp(a * 0.3) / (b + 1.0) - log(a) + sqrt(a * b) + (a - b) ** 2
        return (y * y).mean() + norm(a, axis=1).sum()

    assert grad_check(f, [a, b]) < 1e-6


def test_log_softmax_rows_normalize(rng):
    x = Parameter(rng.standard_normal((5, 4)) * 3, "x")
    lp = log_softmax(x)
    np.testing.assert_allclose(np.exp(lp.data).sum(axis=1), 1.0, rtol=1e-12)
    assert grad_check(lambda: (log_softmax(x) * Tensor(np.arange(20.0).reshape(5, 4))).sum(), [x]) < 1e-5


def test_norm_gradient_at_origin_is_zero():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    (g,) = grad(norm(x, axis=1).sum(), [x])
    np.testing.assert_array_equal(g.data, np.zeros((1, 3)))


def test_max_ties_route_to_lowest_index():
    x = Tensor(np.array([[1.0, 3.0], [3.0, 3.0], [2.0, 0.0]]), requires_grad=True)
    (g,) = grad(x.max(axis=0).sum(), [x])
    np.testing.assert_array_equal(g.data, [[0, 1], [1, 0], [0, 0]])


def test_broadcast_add_reduces_grad(rng):
    a = Parameter(rng.standard_normal((2, 3, 4)), "a")
    b = Parameter(rng.standard_normal((1, 4)), "b")
    ga, gb = grad((a + b).sum(), [a, b])
    np.testing.assert_array_equal(gb.data, np.full((1, 4), 6.0))
    assert ga.shape == a.shape


def test_batched_matmul_with_shared_weight(rng):
    x = Parameter(rng.standard_normal((3, 5, 4)), "x")
    W = Parameter(rng.standard_normal((4, 2)), "W")
    y = matmul(x, W)
    np.testing.assert_allclose(y.data, np.einsum("bnk,km->bnm", x.data, W.data), rtol=1e-12)
    assert grad_check(lambda: (matmul(x, W) ** 2).sum(), [x, W]) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_repeat_rows_matches_numpy(m, f, r):
    x = np.arange(m * f, dtype=np.float64).reshape(m, f)
    np.testing.assert_array_equal(repeat_rows(Tensor(x), r).data, np.repeat(x, r, axis=0))


def test_default_dtype_context():
    with default_dtype(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_scalar_operand_takes_tensor_dtype():
    t = Tensor(np.ones(2, dtype=np.float32))
    assert (t * 0.5 + 1.0).dtype == np.float32


# ---------------------------------------------------------------- Adam

def _adam_step(g, lr=1e-4, betas=(0.0, 0.99), steps=1):
    p = Parameter(np.array([1.0, -2.0, 0.5]), "p")
    opt = Adam([p], lr=lr, betas=betas, eps=1e-8)
    deltas = []
    for _ in range(steps):
        before = p.data.copy()
        p.grad = np.array(g, dtype=np.float64)
        opt.step()
        deltas.append(p.data - before)
    return deltas


def test_adam_first_step_magnitude_is_lr():
    (d,) = _adam_step([0.3, -5.0, 1e-2])
    np.testing.assert_allclose(d, -1e-4 * np.sign([0.3, -5.0, 1e-2]), rtol=1e-5)


def test_adam_zero_grad_leaves_param():
    (d,) = _adam_step([0.0, 0.0, 0.0])
    np.testing.assert_array_equal(d, 0.0)


def test_adam_second_identical_step_within_five_percent():
    d1, d2 = _adam_step([0.3, -5.0, 1e-2], steps=2)
    assert np.all(np.abs(np.abs(d2) - np.abs(d1)) <= 0.05 * np.abs(d1))


def test_adam_closed_form_two_steps():
    g = np.array([0.3, -5.0, 1e-2])
    d1, d2 = _adam_step(g, betas=(0.9, 0.999), steps=2)
    # same gradient twice: bias-corrected moments equal g and g^2
    np.testing.assert_allclose(d2, -1e-4 * g / (np.abs(g) + 1e-8), rtol=1e-9)


@settings(max_examples=30)
@given(arrays(np.float64, 3, elements=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3)))
def test_adam_first_step_bounded_by_lr(g):
    (d,) = _adam_step(g)
    assert np.all(np.abs(d) <= 1e-4 * (1 + 1e-9))
