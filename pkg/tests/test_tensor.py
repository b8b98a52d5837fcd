import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from surgekit import tensor as tn
from surgekit.errors import ContractError, DimensionError
from surgekit.tensor import GradTape, Parameter, Tensor

from helpers import numeric_grad, rel_error


def grads(fn, *arrays_in):
    ts = [Tensor(a, requires_grad=True) for a in arrays_in]
    with GradTape() as tape:
        out = tn.reduce_sum(fn(*ts))
    return tape.gradient(out, ts)


def test_tensor_is_read_only_and_copies_input():
    src = np.ones((2, 3))
    t = Tensor(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 2.0


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_scalar_tensor():
    t = Tensor(2.5)
    assert t.shape == () and t.item() == 2.5


def test_suffix_broadcast_allowed_and_other_rejected():
    a = Tensor(np.ones((4, 3)))
    b = Tensor(np.arange(3.0))
    np.testing.assert_array_equal(tn.add(a, b).data, np.ones((4, 3)) + np.arange(3.0))
    with pytest.raises(DimensionError):
        tn.add(a, Tensor(np.ones((4, 1))))
    with pytest.raises(DimensionError):
        tn.add(a, Tensor(np.ones(4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gradient_needs_scalar_loss_from_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = tn.mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.gradient(y, [x])
    other = tn.reduce_sum(Tensor(np.ones(3)))
    with pytest.raises(ContractError):
        tape.gradient(other, [x])


def test_unused_source_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = tn.reduce_sum(tn.square(x))
    gx, gz = tape.gradient(loss, [x, z])
    np.testing.assert_array_equal(gx, 2 * np.ones(3))
    np.testing.assert_array_equal(gz, np.zeros((2, 2)))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tn.mul(x, x)
    assert not y.requires_grad


def test_backward_accumulates_into_parameters():
    p = Parameter("w", np.array([1.0, -2.0]))
    for _ in range(2):
        with GradTape() as tape:
            loss = tn.reduce_sum(tn.mul(p.value, p.value))
        tn.backward(tape, loss, [p])
    np.testing.assert_array_equal(p.grad, 2 * 2 * np.array([1.0, -2.0]))
    p.zero_grad()
    assert not p.grad.any()


def test_tapes_are_thread_local():
    seen = {}

    def worker():
        seen["tape"] = tn.current_tape()

    with GradTape():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["tape"] is None


def test_reshape_flatten_split_concat_roundtrip():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 4))
    t = Tensor(a)
    assert tn.flatten(t, 1).shape == (2, 12)
    assert tn.reshape(t, (-1, 4)).shape == (6, 4)
    parts = tn.split(t, [1, 3], axis=-1)
    np.testing.assert_array_equal(tn.concat(parts, axis=-1).data, a)
    with pytest.raises(DimensionError):
        tn.reshape(t, (5, 5))
    with pytest.raises(DimensionError):
        tn.concat([], axis=0)


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "square"])
def test_unary_gradients_match_finite_differences(op):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4))
    fn = getattr(tn, op)
    (g,) = grads(fn, x)
    num = numeric_grad(lambda: float(np.sum(fn(Tensor(x)).data)), x)
    assert rel_error(g, num) < 1e-6


def test_relu_gradient_away_from_kink():
    x = np.array([[-1.5, 0.3], [2.0, -0.1]])
    (g,) = grads(tn.relu, x)
    np.testing.assert_array_equal(g, (x > 0).astype(float))


def test_matmul_and_reduce_gradients():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 2, 3)), rng.standard_normal((3, 4))
    ga, gb = grads(lambda x, y: tn.reduce_mean(tn.matmul(x, y), axes=(0,)), a, b)
    f = lambda: float(np.sum(np.mean(a @ b, axis=0)))
    assert rel_error(ga, numeric_grad(f, a)) < 1e-6
    assert rel_error(gb, numeric_grad(f, b)) < 1e-6


def test_slice_gradient_scatters():
    x = np.arange(6.0).reshape(2, 3)
    (g,) = grads(lambda t: tn.slice_axis(t, 1, 3, axis=1), x)
    np.testing.assert_array_equal(g, [[0, 1, 1], [0, 1, 1]])


small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(small)
def test_add_mul_gradients_property(a):
    b = np.cos(a) + 2.0
    ga, gb = grads(lambda x, y: tn.mul(tn.add(x, y), y), a, b)
    np.testing.assert_allclose(ga, b, atol=1e-12)
    np.testing.assert_allclose(gb, a + 2 * b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(small)
def test_bias_broadcast_gradient_sums_leading_axes(a):
    bias = np.linspace(-1, 1, a.shape[1])
    _, gb = grads(tn.add, a, bias)
    np.testing.assert_array_equal(gb, np.full(a.shape[1], float(a.shape[0])))


@settings(max_examples=30, deadline=None)
@given(small)
def test_sub_is_add_of_negation(a):
    b = a[::-1].copy()
    np.testing.assert_array_equal(tn.sub(Tensor(a), Tensor(b)).data, (Tensor(a) + (-Tensor(b))).data)
