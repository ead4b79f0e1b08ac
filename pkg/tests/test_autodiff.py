import numpy as np
import pytest
import scipy.sparse as sp

from amrgnn.autodiff import (NonScalarLoss, ShapeMismatch, Tensor, backward, concat, gather_rows,
                             numerical_grad, parameter, segment_softmax, segment_sum, sparse_matmul)


def check_grad(fn, param, rtol=1e-6):
    param.grad = None
    backward(fn())
    num = numerical_grad(fn, param, eps=1e-6)
    np.testing.assert_allclose(param.grad, num, rtol=rtol, atol=1e-9)


def test_square_of_repeated_parent():
    x = parameter([1.5, -2.0])
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [3.0, -4.0])


def test_broadcast_add_and_mul():
    rng = np.random.default_rng(0)
    a = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(3,)))
    check_grad(lambda: ((a + b) * b - 2.0 * a).square().sum(), b)
    check_grad(lambda: ((a + b) * b - 2.0 * a).square().sum(), a)


def test_matmul_relu_clip_mean():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 4)))
    w = parameter(rng.normal(size=(4, 3)))
    check_grad(lambda: (x @ w).relu().mean(), w)
    check_grad(lambda: (x @ w).clip(-0.5, 0.5).sum(), w)


def test_reshape_getitem_sum_axis():
    rng = np.random.default_rng(2)
    w = parameter(rng.normal(size=(6, 4)))
    check_grad(lambda: w.reshape(3, 8)[1:, 2:5].sum(axis=0).square().sum(), w)


def test_graph_ops():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(size=(5, 2)))
    idx = np.array([0, 2, 2, 4, 1, 0])
    seg = np.array([0, 0, 1, 2, 2, 2])
    check_grad(lambda: segment_sum(gather_rows(x, idx), seg, 3).square().sum(), x)
    check_grad(lambda: (segment_softmax(gather_rows(x, idx), seg, 3) * np.arange(12.0).reshape(6, 2)).sum(), x)
    m = sp.random(3, 5, density=0.6, random_state=4, format="csr")
    check_grad(lambda: sparse_matmul(m, x).square().sum(), x)
    check_grad(lambda: concat([x, x * 2.0], axis=1).square().sum(), x)


def test_softmax_rows_sum_to_one_with_large_scores():
    scores = Tensor(np.array([[1000.0], [999.0], [-1000.0], [5.0]]))
    p = segment_softmax(scores, np.array([0, 0, 1, 1]), 2).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose([p[0] + p[1], p[2] + p[3]], 1.0, atol=1e-15)


def test_errors():
    with pytest.raises(NonScalarLoss):
        backward(parameter(np.ones(3)) * 2.0)
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        sparse_matmul(sp.eye(3, format="csr"), Tensor(np.ones((4, 2))))


def test_gradients_accumulate_on_leaves_only():
    x = parameter([2.0])
    y = x * 3.0
    backward(y.sum())
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [6.0])
    assert y.grad is None
