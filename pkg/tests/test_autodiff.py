import numpy as np
import pytest

from hashexit.autodiff import Tensor, patchify, stack_rows
from hashexit.errors import DimensionError, GradientError
from hashexit.numerics import check_gradients

rng = np.random.default_rng(1234)


def test_elementwise_forward_values():
    a = Tensor([1.0, -2.0, 3.0])
    b = Tensor([0.5, 4.0, -1.0])
    assert np.allclose((a + b).data, [1.5, 2.0, 2.0])
    assert np.allclose((a - b).data, [0.5, -6.0, 4.0])
    assert np.allclose((a * b).data, [0.5, -8.0, -3.0])
    assert np.allclose((a / b).data, [2.0, -0.5, -3.0])


def test_broadcast_gradients():
    # (N, D) + (D,) bias broadcast: bias grad sums over the batch
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    (x + b).sum().backward()
    assert np.allclose(b.grad, np.full(3, 4.0))
    assert np.allclose(x.grad, np.ones((4, 3)))


W_FIXED = Tensor(np.random.default_rng(7).standard_normal((5, 2)))


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: (t * t).sum(),
        lambda t: (t @ W_FIXED).tanh().sum(),
        lambda t: t.relu().sum(),
        lambda t: t.sigmoid().square().sum(),
        lambda t: t.softsign().sum(),
        lambda t: (t.exp() + 1.0).log().sum(),
        lambda t: (t.square() + 0.5).sqrt().sum(),
        lambda t: t.reshape(10, 2).transpose().sum(axis=1).square().sum(),
        lambda t: t.mean(axis=0).square().sum(),
        lambda t: (t / (t.square().sum(axis=1, keepdims=True).sqrt() + 1.0)).sum(),
    ],
)
def test_op_gradients_match_finite_differences(fn):
    x = rng.standard_normal((4, 5)) + 0.1
    assert check_gradients(fn, x, h=1e-5) < 1e-6


def test_take_pairs_gradient_scatters():
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    rows = np.array([0, 0, 2])
    cols = np.array([1, 1, 3])
    x.take_pairs(rows, cols).sum().backward()
    expected = np.zeros((4, 4))
    expected[0, 1] = 2.0  # duplicated index accumulates
    expected[2, 3] = 1.0
    assert np.array_equal(x.grad, expected)


def test_patchify_roundtrip_and_gradient():
    x = rng.standard_normal((2, 4, 6, 3))
    patches = patchify(Tensor(x), 2, 2)
    assert patches.shape == (2, 2, 3, 12)
    # every input value appears exactly once
    assert np.isclose(patches.data.sum(), x.sum())
    err = check_gradients(lambda t: patchify(t, 2, 2).square().sum(), x, h=1e-5)
    assert err < 1e-6


def test_patchify_rejects_misaligned_shapes():
    with pytest.raises(DimensionError):
        patchify(Tensor(np.zeros((1, 3, 4, 2))), 2, 2)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


def test_sign_backward_raises():
    x = Tensor([0.2, -0.4], requires_grad=True)
    y = x.sign().sum()
    with pytest.raises(GradientError):
        y.backward()


def test_sign_zero_maps_to_minus_one():
    assert np.array_equal(Tensor([0.3, -0.1, 0.0]).sign().data, [1.0, -1.0, -1.0])


def test_sqrt_zero_subgradient_is_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    x.sqrt().sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.25])


def test_stack_rows_gradient():
    parts = [Tensor(rng.standard_normal(3), requires_grad=True) for _ in range(4)]
    stack_rows(parts).square().sum().backward()
    for p in parts:
        assert np.allclose(p.grad, 2.0 * p.data)


def test_grad_accumulates_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert np.allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_diamond_graph_gradient():
    # y = a*a + a*a reuses the same node twice
    a = Tensor([3.0], requires_grad=True)
    b = a * a
    (b + b).backward()
    assert np.allclose(a.grad, [12.0])


def test_forward_is_deterministic():
    x = rng.standard_normal((8, 8))
    w = rng.standard_normal((8, 4))
    one = (Tensor(x) @ Tensor(w)).tanh().softsign().data
    two = (Tensor(x) @ Tensor(w)).tanh().softsign().data
    assert np.array_equal(one, two)
