import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fidelity_lab import numerics as nx
from fidelity_lab.numerics import GradTape, NonFiniteError, Tensor, grad_check, matmul, sigmoid, softmax_rows


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity_and_small():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), x).data, x.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_random_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3)), 2.0), [[1 / 3] * 3], atol=1e-15)
    e = math.e
    np.testing.assert_allclose(softmax_rows(np.array([[1.0, 0.0]]), 1.0), [[e / (e + 1), 1 / (1 + e)]], atol=1e-15)
    assert softmax_rows(np.array([[1.0, 0.0]]), 1.0)[0, 0] == pytest.approx(0.7311, abs=1e-4)
    np.testing.assert_allclose(softmax_rows(np.array([[5.0, -3.0, 1.0]]), 1e9), [[1 / 3] * 3], atol=1e-6)
    np.testing.assert_allclose(softmax_rows(np.array([[5.0, -3.0, 1.0]]), math.inf), [[1 / 3] * 3], atol=0)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ValueError):
        softmax_rows(np.zeros((1, 2)), tau)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.floats(0.01, 100))
def test_softmax_rows_sum_to_one(x, tau):
    out = softmax_rows(x, tau)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-10.0) == pytest.approx(1.0 / (1.0 + math.exp(10.0)), rel=1e-12)
    assert sigmoid(-10.0) == pytest.approx(4.5398e-5, abs=1e-9)
    assert sigmoid(1000.0) == 1.0 and sigmoid(-1000.0) == 0.0
    assert np.isfinite(sigmoid(np.array([-800.0, 800.0]))).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(-700, 700)))
def test_sigmoid_symmetry_and_bounds(x):
    s = sigmoid(x)
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-15)
    assert np.all((s >= 0) & (s <= 1))
    order = np.argsort(x)
    assert np.all(np.diff(s[order]) >= 0)


def test_grad_check_examples():
    assert grad_check(lambda p: (p * p).sum(), np.array([3.0]), 1e-5) < 1e-8
    assert grad_check(lambda p: Tensor(7.0) + 0.0 * 0.0, np.array([1.0, 2.0])) == 0.0


def test_grad_check_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        grad_check(lambda p: Tensor(np.nan) + p.sum() * 0, np.array([1.0]))


OPS = {
    "add_broadcast": lambda p: (p + Tensor(np.arange(3.0))).square().sum(),
    "sub": lambda p: (Tensor(np.ones((2, 3))) - p).square().sum(),
    "mul": lambda p: (p * p * Tensor(np.linspace(-1, 1, 6).reshape(2, 3))).sum(),
    "div": lambda p: (Tensor(np.ones((2, 3))) / (p.square() + 1.0)).sum(),
    "matmul": lambda p: matmul(p, Tensor(np.arange(12.0).reshape(3, 4) / 10)).tanh().sum(),
    "matmul_rhs": lambda p: matmul(Tensor(np.arange(4.0).reshape(2, 2)), p).square().sum(),
    "exp_log": lambda p: (p.exp() + 1.0).log().sum(),
    "sqrt": lambda p: (p.square() + 1.0).sqrt().sum(),
    "sigmoid": lambda p: sigmoid(p * 2.0).square().sum(),
    "softplus": lambda p: nx.softplus(p * 3.0).sum(),
    "silu": lambda p: nx.silu(p).sum(),
    "softmax": lambda p: (softmax_rows(p, 0.7) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "mean_axis": lambda p: p.mean(axis=1).square().sum(),
    "reshape_transpose": lambda p: (p.reshape(3, 2).transpose() * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "getitem": lambda p: p[np.array([0, 1, 1]), np.array([2, 0, 0])].square().sum(),
    "concat": lambda p: nx.concat([p, p * 2.0], axis=0).square().mean(),
    "layer_norm": lambda p: (nx.layer_norm(p, Tensor(np.ones(3) * 1.5), Tensor(np.zeros(3)))
                             * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        p = rng.standard_normal((2, 3))
        assert grad_check(OPS[name], p, 1e-5) < 1e-5


def test_relu_grad_check_away_from_kink():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.standard_normal((2, 3))
        p = np.where(np.abs(p) < 1e-2, 0.5, p)
        assert grad_check(lambda q: (q.relu() * q).sum(), p) < 1e-5


def test_batched_matmul_gradient():
    rng = np.random.default_rng(2)
    b = Tensor(rng.standard_normal((4, 3, 2)))
    assert grad_check(lambda p: matmul(p, b).square().sum(), rng.standard_normal((4, 2, 3))) < 1e-5
    assert grad_check(lambda p: matmul(b, p).square().sum(), rng.standard_normal((2, 5))) < 1e-5


def test_tape_single_use_and_nesting():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = (w * w).sum()
        with pytest.raises(RuntimeError):
            with GradTape():
                pass
    (g,) = tape.gradient(y, [w])
    np.testing.assert_array_equal(g, [2.0, 4.0])
    with pytest.raises(RuntimeError):
        tape.gradient(y, [w])


def test_unused_param_gets_zero_grad_and_untracked_ops_are_not_recorded():
    w = Tensor([1.0], requires_grad=True)
    other = Tensor([5.0], requires_grad=True)
    with GradTape() as tape:
        const = Tensor([2.0]) * 3.0
        y = (w * const).sum()
    assert len(tape._nodes) == 2
    gw, go = tape.gradient(y, [w, other])
    assert gw.tolist() == [6.0] and go.tolist() == [0.0]


def test_nonfinite_detected_at_op_boundary():
    with pytest.raises(NonFiniteError):
        Tensor([0.0]).log()


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0
