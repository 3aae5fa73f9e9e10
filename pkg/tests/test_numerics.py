import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uasparse import numerics as nx
from helpers import numeric_grad, rel_err


def T(a, grad=True, dtype=np.float64):
    return nx.Tensor(np.array(a, dtype=dtype), requires_grad=grad)


def check_grad(build, *arrays, tol=1e-5, weights_seed=0):
    """Compare the tape gradient of sum(w * build(...)) against central differences."""
    tensors = [T(a) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(weights_seed).normal(size=out.shape)
    loss = nx.sum_(nx.mul(out, nx.Tensor(w)))
    loss.backward()
    for t in tensors:
        def f():
            return float((build(*[nx.Tensor(x.data) for x in tensors]).data * w).sum())
        expected = numeric_grad(f, t.data)
        assert rel_err(t.grad, expected) < tol


def test_matmul_examples():
    x = np.array([[2.0, -1.0], [0.5, 3.0]])
    assert np.array_equal(nx.matmul(T(np.eye(2)), T(x)).data, x)
    assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]
    with pytest.raises(nx.ShapeMismatch):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradient_float32():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    ta = nx.Tensor(a, requires_grad=True)
    tb = nx.Tensor(b, requires_grad=True)
    nx.sum_(nx.matmul(ta, tb)).backward()

    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    ga = numeric_grad(lambda: float((a64 @ b64).sum()), a64, eps=1e-3)
    gb = numeric_grad(lambda: float((a64 @ b64).sum()), b64, eps=1e-3)
    assert rel_err(ta.grad, ga) < 1e-2
    assert rel_err(tb.grad, gb) < 1e-2


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-12)
    y = nx.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0) and y[1] < 1e-12
    # exp(x)/sum(exp(x)) at [1,2,3]
    np.testing.assert_allclose(nx.softmax(T([1.0, 2.0, 3.0])).data,
                               [0.09003, 0.24473, 0.66524], atol=1e-4)


def test_masked_softmax_zero_weight_and_uniform_fallback():
    x = T([[1.0, 5.0, -2.0], [0.3, 0.1, 0.2]])
    mask = np.array([[True, False, True], [False, False, False]])
    y = nx.softmax(x, axis=-1, mask=mask).data
    assert y[0, 1] == 0.0
    assert y[0].sum() == pytest.approx(1.0)
    np.testing.assert_allclose(y[1], [1 / 3] * 3)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax(nx.Tensor(x), axis=-1).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_selu_examples():
    assert nx.selu(T([0.0])).data[0] == 0.0
    assert nx.selu(T([1.0])).data[0] == pytest.approx(1.0507009873554805, abs=1e-15)
    expected = 1.0507009873554805 * 1.6732632423543772 * (math.exp(-1) - 1)
    assert nx.selu(T([-1.0])).data[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-1.11133, abs=1e-4)


def test_cross_entropy_examples():
    assert nx.cross_entropy_loss(T([0.0, 0.0]), 0).item() == pytest.approx(math.log(2))
    assert nx.cross_entropy_loss(T([10.0, -10.0]), 0).item() < 1e-4
    with pytest.raises(nx.IndexOutOfRange):
        nx.cross_entropy_loss(T([0.0, 1.0]), 2)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = T([1.0, 2.0, 3.0])
    nx.cross_entropy_loss(logits, 1).backward()
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum() - np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(logits.grad, expected, atol=1e-5)
    fd = numeric_grad(lambda: nx.cross_entropy_loss(nx.Tensor(logits.data), 1).item(), logits.data)
    np.testing.assert_allclose(logits.grad, fd, atol=1e-5)


def test_cross_entropy_batched_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5))
    targets = np.array([0, 3, 4, 1])
    t = T(x)
    nx.cross_entropy_loss(t, targets).backward()
    fd = numeric_grad(lambda: nx.cross_entropy_loss(nx.Tensor(x), targets).item(), x)
    assert rel_err(t.grad, fd) < 1e-5


def test_bce_examples():
    onehot = np.array([0.0, 1.0, 0.0])
    assert nx.binary_cross_entropy_loss(T(onehot), onehot).item() < 1e-5
    assert nx.binary_cross_entropy_loss(T([0.5, 0.5]), [1.0, 0.0]).item() == pytest.approx(math.log(2))
    with pytest.raises(nx.ShapeMismatch):
        nx.binary_cross_entropy_loss(T([0.5, 0.5]), [1.0, 0.0, 0.0])


def test_bce_gradient_float32_random_7():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=7)
    t = np.zeros(7)
    t[3] = 1
    tp = nx.Tensor(p.astype(np.float32), requires_grad=True)
    nx.binary_cross_entropy_loss(tp, t.astype(np.float32)).backward()
    fd = numeric_grad(lambda: float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()), p)
    assert rel_err(tp.grad, fd) < 1e-2


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    ("mul", lambda a, b: nx.mul(a, b), [(2, 3), (2, 3)]),
    ("scale", lambda a: nx.scale(a, -2.5), [(3, 3)]),
    ("matmul", lambda a, b: nx.matmul(a, b), [(3, 4), (4, 2)]),
    ("batched matmul", lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("transpose", lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("reshape", lambda a: nx.reshape(a, (4, 3)), [(2, 6)]),
    ("flatten", lambda a: nx.flatten(a), [(2, 3, 2)]),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("sum", lambda a: nx.sum_(a, axis=1), [(3, 4)]),
    ("mean", lambda a: nx.mean(a, axis=0, keepdims=True), [(3, 4)]),
    ("selu", lambda a: nx.selu(a), [(4, 5)]),
    ("relu", lambda a: nx.relu(a), [(4, 5)]),
    ("softmax", lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
    ("masked softmax", lambda a: nx.softmax(a, axis=-1, mask=np.array([True, False, True, True])), [(3, 4)]),
    ("layer_norm", lambda a, g, b: nx.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
])
def test_gradients_match_finite_differences(name, build, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.normal(size=s) + (0.1 if name == "relu" else 0.0) for s in shapes]
    check_grad(build, *arrays)


def test_dropout_identity_and_reproducible():
    x = T(np.ones((4, 6)))
    assert nx.dropout(x, 0.0, np.random.default_rng(0)) is x
    assert nx.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    a = nx.dropout(x, 0.5, np.random.default_rng(9)).data
    b = nx.dropout(x, 0.5, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_sgd_examples():
    p = T([1.0])
    p.grad = np.array([1.0])
    nx.sgd_step([p], nx.SgdConfig(0.1, 0.0))
    assert p.data[0] == pytest.approx(0.9)
    assert p.grad is None

    p = T([1.0])
    p.grad = np.array([0.0])
    nx.sgd_step([p], nx.SgdConfig(0.1, 0.1))
    assert p.data[0] == pytest.approx(0.99)


def test_sgd_quadratic_bowl():
    p = T([1.0])
    for _ in range(100):
        nx.sum_(nx.mul(p, p)).backward()
        nx.sgd_step([p], nx.SgdConfig(0.1))
    assert abs(p.data[0]) < 1e-8
    assert p.data[0] == pytest.approx(0.8 ** 100, rel=1e-9)


def test_sgd_zero_lr_is_identity_and_missing_grad_raises():
    p = T([1.5, -2.0])
    p.grad = np.array([3.0, 4.0])
    nx.sgd_step([p], nx.SgdConfig(0.0, 0.5))
    assert p.data.tolist() == [1.5, -2.0]
    with pytest.raises(nx.MissingGradient):
        nx.sgd_step([p], nx.SgdConfig(0.1))


def test_shared_subexpression_accumulates():
    x = T([2.0, 3.0])
    y = nx.mul(x, x)
    nx.sum_(nx.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)
