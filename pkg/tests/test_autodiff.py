"""Gradient and graph-mechanics tests for the tensor core.

Every primitive gets a central finite-difference check on float64 data; the
composition tests (MLP, GRU chain) cover the topological-sort replay.
"""

import numpy as np
import pytest

from playdream import tensor as T
from playdream.tensor import Tensor

from conftest import check_grads


def leaf(rng, *shape, positive=False, away_from=None):
    x = rng.normal(0.0, 1.0, size=shape)
    if positive:
        x = 0.5 + x * x
    if away_from is not None:
        x = np.sign(x) * (np.abs(x) + 0.05)
    return Tensor(x.astype(np.float64), requires_grad=True)


N_INSTANCES = 5


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_binary_elementwise_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4, positive=True)
    check_grads(lambda: (a + b).sum(), [a, b])
    check_grads(lambda: (a - b).sum(), [a, b])
    check_grads(lambda: (a * b * a).sum(), [a, b])
    check_grads(lambda: (a / b).sum(), [a, b])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_broadcast_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 1)
    b = leaf(rng, 1, 4)
    c = leaf(rng, 4)
    check_grads(lambda: (a * b + c).sum(), [a, b, c])
    check_grads(lambda: (a + 2.0).sum(), [a])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_unary_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 2, 5)
    p = leaf(rng, 2, 5, positive=True)
    check_grads(lambda: T.exp(a).sum(), [a])
    check_grads(lambda: T.log(p).sum(), [p])
    check_grads(lambda: T.tanh(a).sum(), [a])
    check_grads(lambda: T.sigmoid(a).sum(), [a])
    check_grads(lambda: (p ** 1.7).sum(), [p])
    check_grads(lambda: (-a).sum(), [a])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_kinked_grads_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4, away_from=0.0)
    check_grads(lambda: T.relu(a).sum(), [a])
    check_grads(lambda: T.clamp(a * 0.3, -0.2, 0.2).sum(), [a])
    x = leaf(rng, 3, 4)
    y = Tensor(x.data + np.sign(rng.normal(size=(3, 4))) * 0.5, requires_grad=True)
    check_grads(lambda: T.maximum(x, y).sum(), [x, y])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_matmul_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, 2)
    check_grads(lambda: (a @ b).sum(), [a, b])
    x = leaf(rng, 2, 3, 4)
    y = leaf(rng, 2, 4, 5)
    check_grads(lambda: T.bmm(x, y).sum(), [x, y])


def test_matmul_rank_errors():
    a = Tensor(np.zeros((2, 3, 4)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        T.matmul(a, b)
    with pytest.raises(ValueError):
        T.bmm(a, Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_affine_grads(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    w = leaf(rng, 4, 2)
    b = leaf(rng, 2)
    check_grads(lambda: (T.affine(x, w, b) ** 2.0).sum(), [x, w, b])
    np.testing.assert_allclose(T.affine(x, w, b).data, (x @ w + b).data, atol=1e-12)


def test_no_grad_suppresses_graph(rng):
    a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with T.no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    out = (a * 2.0).sum()  # recording resumes after the context exits
    assert out.requires_grad
    out.backward()
    np.testing.assert_allclose(a.grad, 2.0 * np.ones((2, 2)))


def test_no_grad_restores_on_exception(rng):
    a = Tensor(rng.normal(size=(2,)), requires_grad=True)
    with pytest.raises(RuntimeError):
        with T.no_grad():
            raise RuntimeError("boom")
    assert (a * 1.0).requires_grad


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_reduction_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4, 2)
    check_grads(lambda: (a.sum(axis=1) ** 2.0).sum(), [a])
    check_grads(lambda: (a.sum(axis=(0, 2), keepdims=True) ** 2.0).sum(), [a])
    check_grads(lambda: (a.mean(axis=-1) ** 2.0).sum(), [a])
    check_grads(lambda: a.mean() * 3.0, [a])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_shape_op_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 2, 4)
    check_grads(lambda: (a.reshape(2, 6) ** 2.0).sum(), [a])
    check_grads(lambda: (a @ b.transpose()).sum(), [a, b])
    check_grads(lambda: (a.transpose() ** 2.0).sum(), [a])
    check_grads(lambda: (T.concat([a, b], axis=0) ** 2.0).sum(), [a, b])
    check_grads(lambda: (T.stack([a, a * 2.0], axis=1) ** 2.0).sum(), [a])
    check_grads(lambda: (a[1:, ::2] ** 2.0).sum(), [a])
    check_grads(lambda: (a[0] * b[1]).sum(), [a, b])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_gather_rows_grads(seed):
    rng = np.random.default_rng(seed)
    w = leaf(rng, 6, 3)
    idx = rng.integers(0, 6, size=(4, 2))  # repeated rows must accumulate
    check_grads(lambda: (T.gather_rows(w, idx) ** 2.0).sum(), [w])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_image_op_grads(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 3, 6, 6)

    def conv_like():
        cols, oh, ow = T.im2col(x, 3, 2, 1)
        return (cols ** 2.0).sum() + cols.sum()

    check_grads(conv_like, [x])
    y = leaf(rng, 2, 2, 3, 3)
    check_grads(lambda: (T.upsample2x(y) ** 2.0).sum(), [y])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_softmax_family_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 4, 5)
    w = Tensor(rng.normal(size=(4, 5)))
    check_grads(lambda: (T.softmax(a) * w).sum(), [a])
    check_grads(lambda: (T.log_softmax(a) * w).sum(), [a])
    check_grads(lambda: T.softplus(a).sum(), [a])


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(7, 9)) * 10.0)
    p = T.softmax(x).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_mlp_composition_grads(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    w1, b1 = leaf(rng, 4, 5), leaf(rng, 5)
    w2, b2 = leaf(rng, 5, 2), leaf(rng, 2)

    def forward():
        h = T.tanh(x @ w1 + b1)
        return ((h @ w2 + b2) ** 2.0).sum()

    check_grads(forward, [w1, b1, w2, b2])


@pytest.mark.parametrize("seed", range(3))
def test_gru_chain_grads(seed):
    """Three recurrent steps through shared weights; accumulation across time."""
    rng = np.random.default_rng(seed)
    wx, wh, b = leaf(rng, 3, 6), leaf(rng, 2, 6), leaf(rng, 6)
    xs = Tensor(rng.normal(size=(4, 3, 3)))  # [T, B, in]

    def forward():
        h = Tensor(np.zeros((3, 2), dtype=np.float64))
        for t in range(4):
            xz = xs[t] @ wx + b
            hz = h @ wh
            r = T.sigmoid(xz[:, :2] + hz[:, :2])
            u = T.sigmoid(xz[:, 2:4] + hz[:, 2:4])
            c = T.tanh(xz[:, 4:] + r * hz[:, 4:])
            h = u * h + (1.0 - u) * c
        return (h ** 2.0).sum()

    check_grads(forward, [wx, wh, b])


def test_two_consumers_accumulate(rng):
    x = Tensor(rng.normal(size=(3,)).astype(np.float64), requires_grad=True)
    loss = x.sum() + x.sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_repeated_backward_accumulates(rng):
    x = Tensor(rng.normal(size=(3,)).astype(np.float64), requires_grad=True)
    loss = (x * 3.0).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))
    x.zero_grad()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_detach_blocks_gradient(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    loss = (x.detach() * x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, x.data)  # only the live branch contributes


def test_stop_gradient_alias(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    y = T.stop_gradient(x * 2.0)
    assert not y.requires_grad
    np.testing.assert_allclose(y.data, 2.0 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 1.0).backward()


def test_backward_requires_connection():
    x = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        x.sum().backward()


def test_deep_chain_no_recursion_limit():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(1))


def test_dtype_follows_inputs(rng):
    a32 = Tensor(rng.normal(size=(3,)).astype(np.float32))
    assert (a32 * 2.0).dtype == np.float32
    a64 = Tensor(rng.normal(size=(3,)).astype(np.float64))
    assert (a64 * 2.0).dtype == np.float64


def test_assert_finite():
    T.assert_finite(Tensor(np.ones(3)))
    with pytest.raises(T.NonFiniteError):
        T.assert_finite(Tensor(np.array([1.0, np.nan])))
