import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddvqa import tensor as T
from ddvqa._ext import _pykernels, available_backends
from ddvqa.tensor import Tensor, no_grad

from helpers import numeric_grad, rel_err


def _check(build, *shapes, seed=0, tol=1e-4, low=-1.0, high=1.0):
    """Compare autodiff of ``sum(build(*xs) * w)`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [T.param(rng.uniform(low, high, s)) for s in shapes]
    out_shape = build(*xs).shape
    w = rng.normal(size=out_shape)

    def f():
        with no_grad():
            return float((build(*xs).data * w).sum())

    loss = T.tsum(T.mul(build(*xs), Tensor(w)))
    loss.backward()
    for x in xs:
        num = numeric_grad(f, x.data)
        assert rel_err(x.grad, num) < tol


# -- matmul -------------------------------------------------------------------------
def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_grad_linearity():
    a = T.param(np.eye(2))
    b = Tensor([[2.0], [3.0]])
    T.tsum(a @ b).backward()
    np.testing.assert_array_equal(a.grad, [[2, 3], [2, 3]])


def test_matmul_finite_differences():
    _check(T.matmul, (3, 4), (4, 2), tol=1e-6)


def test_matmul_batched_finite_differences():
    _check(T.matmul, (2, 3, 4), (4, 5))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------------
def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_inputs_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_scalar_oracle():
    z = math.exp(1) + math.exp(2) + math.exp(3)
    expected = [math.exp(1) / z, math.exp(2) / z, math.exp(3) / z]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=0, atol=1e-15)


def test_softmax_other_axis():
    x = np.random.default_rng(1).normal(size=(3, 4))
    out = T.softmax(Tensor(x), axis=0).data
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
    _check(lambda a: T.softmax(a, axis=0), (3, 4))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x)).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10)), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data,
                               atol=1e-9)


def test_softmax_and_log_softmax_gradients():
    _check(T.softmax, (3, 5))
    _check(T.log_softmax, (2, 3, 4))


# -- layer norm ---------------------------------------------------------------------
def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_points():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)
    # exact value with eps inside the square root
    np.testing.assert_allclose(out.data[0, 1], 1.0 / math.sqrt(1.0 + 1e-5), rtol=1e-15)


def test_layer_norm_gradients():
    _check(lambda x, g, b: T.layer_norm(x, g, b), (3, 6), (6,), (6,), tol=1e-5)


def test_layer_norm_shape_error():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- cross entropy ------------------------------------------------------------------
def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((1, 8))), [3])
    assert loss.item() == pytest.approx(math.log(8), abs=1e-15)
    assert round(loss.item(), 4) == 2.0794


def test_cross_entropy_certain():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e6
    assert T.cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_scalar_oracle():
    logits = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0]]
    targets = [1, 0, 2]
    expected = 0.0
    for row, t in zip(logits, targets):
        z = sum(math.exp(v) for v in row)
        expected += -(row[t] - math.log(z))
    expected /= 3
    assert abs(T.cross_entropy(Tensor(logits), targets).item() - expected) < 1e-9


def test_cross_entropy_ignore_index():
    logits = Tensor([[1.0, 2.0], [5.0, 0.0]])
    full = T.cross_entropy(Tensor([[1.0, 2.0]]), [0]).item()
    assert T.cross_entropy(logits, [0, -100], ignore_index=-100).item() == full


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError, match="ignored"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 0], ignore_index=0)


def test_cross_entropy_gradient():
    targets = np.array([0, 3, 1, 0])
    _check(lambda x: T.cross_entropy(x, targets, ignore_index=0), (4, 5))


def test_sequence_nll_matches_per_row_means():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 3, 4))
    targets = np.array([[1, 2, 0], [3, 0, 0]])
    w = np.array([0.25, 0.75])
    got = T.sequence_nll(Tensor(logits), targets, 0, w).item()
    r0 = T.cross_entropy(Tensor(logits[0]), targets[0], ignore_index=0).item()
    r1 = T.cross_entropy(Tensor(logits[1]), targets[1], ignore_index=0).item()
    assert got == pytest.approx(0.25 * r0 + 0.75 * r1, abs=1e-12)
    _check(lambda x: T.sequence_nll(x, targets, 0, w), (2, 3, 4))


def test_bce_with_logits():
    z = np.array([0.0, 2.0, -3.0])
    y = np.array([1.0, 0.0, 0.0])
    expected = np.mean([math.log(2), math.log1p(math.exp(2)), math.log1p(math.exp(-3))])
    assert T.binary_cross_entropy_with_logits(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)
    _check(lambda x: T.binary_cross_entropy_with_logits(x, [1, 0, 1, 0]), (4,))


# -- backward semantics -------------------------------------------------------------
def test_sum_grad_is_ones():
    x = T.param(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_grad():
    x = T.param(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_reused_node_sums_contributions():
    x = T.param(1.5)
    (x + x).backward()
    assert x.grad == 2.0


def test_grads_accumulate_until_zeroed():
    x = T.param([1.0, 2.0])
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.param(np.ones(3)).backward()


def test_no_grad_records_nothing():
    x = T.param([1.0, 2.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(-1, 1, (4, 3)))
    w1, b1 = T.param(rng.normal(size=(3, 5))), T.param(rng.normal(size=5))
    w2, b2 = T.param(rng.normal(size=(5, 2))), T.param(rng.normal(size=2))
    targets = [0, 1, 1, 0]

    def loss():
        h = T.gelu(T.linear(x, w1, b1))
        return T.cross_entropy(T.linear(h, w2, b2), targets)

    loss().backward()
    for p in (w1, b1, w2, b2):
        def f():
            with no_grad():
                return loss().item()
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-4


# -- remaining differentiable ops ---------------------------------------------------
@pytest.mark.parametrize("op", [T.exp, T.tanh, T.sigmoid, T.gelu, T.neg])
def test_elementwise_gradients(op):
    _check(op, (3, 4))


def test_log_and_sqrt_gradients():
    _check(T.log, (5,), low=0.5, high=2.0)
    _check(T.sqrt, (5,), low=0.5, high=2.0)


def test_relu_gradient_away_from_kink():
    _check(T.relu, (6,), low=0.1, high=1.0)
    _check(T.relu, (6,), low=-1.0, high=-0.1)


def test_broadcasting_gradients():
    _check(T.add, (3, 4), (4,))
    _check(T.mul, (2, 3, 4), (3, 1))
    _check(T.div, (3, 4), (1, 4), low=0.5, high=1.5)


def test_shape_op_gradients():
    _check(lambda a: T.reshape(a, (6, 2)), (3, 4))
    _check(lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4))
    _check(lambda a: T.swapaxes(a, 0, 2), (2, 3, 4))
    _check(lambda a: a[1:, ::2], (3, 4))
    _check(lambda a: T.take_rows(a, [2, 0, 2]), (3, 4))
    _check(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))
    _check(lambda a, b: T.stack([a, b], axis=0), (2, 3), (2, 3))
    _check(lambda a: T.mean(a, axis=1, keepdims=True), (3, 4))
    _check(lambda a: T.tsum(a, axis=(0, 2)), (2, 3, 4))


def test_linear_and_l2_normalize_gradients():
    _check(T.linear, (2, 3, 4), (4, 5), (5,))
    _check(T.l2_normalize, (3, 4))


def test_embedding_gradient_accumulates_repeats():
    table = T.param(np.zeros((4, 2)))
    T.tsum(T.embedding(table, [[1, 1], [3, 1]])).backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [3, 3], [0, 0], [1, 1]])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(T.param(np.zeros((4, 2))), [4])


def test_l2_normalize_zero_vector():
    with pytest.raises(ValueError):
        T.l2_normalize(Tensor(np.zeros((1, 3))))


def test_sinusoidal_positions_first_rows():
    pe = T.sinusoidal_positions(2, 4)
    np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)],
                               atol=1e-15)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        w = T.param(rng.normal(size=(6, 6)))
        x = Tensor(rng.normal(size=(5, 6)))
        loss = T.tsum(T.softmax(T.layer_norm(x @ w, Tensor(np.ones(6)), Tensor(np.zeros(6)))))
        loss.backward()
        return loss.item(), w.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a == b
    np.testing.assert_array_equal(ga, gb)


# -- backends -----------------------------------------------------------------------
def _kernel_cases(rng):
    x = rng.normal(size=(7, 9))
    g = rng.normal(size=(7, 9))
    gain, bias = rng.normal(size=9), rng.normal(size=9)
    return x, g, gain, bias


@pytest.mark.parametrize("name", sorted(available_backends()))
def test_backend_kernels_agree_with_python(name):
    k = available_backends()[name]
    x, g, gain, bias = _kernel_cases(np.random.default_rng(0))
    ref = _pykernels
    np.testing.assert_allclose(k.softmax_forward(x), ref.softmax_forward(x), rtol=1e-12, atol=1e-15)
    y = ref.softmax_forward(x)
    np.testing.assert_allclose(k.softmax_backward(y, g), ref.softmax_backward(y, g), atol=1e-12)
    np.testing.assert_allclose(k.log_softmax_forward(x), ref.log_softmax_forward(x), atol=1e-12)
    ly = ref.log_softmax_forward(x)
    np.testing.assert_allclose(k.log_softmax_backward(ly, g), ref.log_softmax_backward(ly, g), atol=1e-12)
    out_k = k.layer_norm_forward(x, gain, bias, 1e-5)
    out_r = ref.layer_norm_forward(x, gain, bias, 1e-5)
    for a, b in zip(out_k, out_r):
        np.testing.assert_allclose(a, b, atol=1e-12)
    bk = k.layer_norm_backward(g, out_r[1], out_r[2], gain)
    br = ref.layer_norm_backward(g, out_r[1], out_r[2], gain)
    for a, b in zip(bk, br):
        np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(k.gelu_forward(x), ref.gelu_forward(x), atol=1e-12)
    np.testing.assert_allclose(k.gelu_backward(x, g), ref.gelu_backward(x, g), atol=1e-12)


@pytest.mark.parametrize("name", sorted(available_backends()))
@settings(max_examples=50)
@given(a=st.lists(st.integers(0, 4), max_size=12), b=st.lists(st.integers(0, 4), max_size=12))
def test_lcs_matches_dynamic_programme(name, a, b):
    k = available_backends()[name]
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            dp[i + 1][j + 1] = dp[i][j] + 1 if a[i] == b[j] else max(dp[i][j + 1], dp[i + 1][j])
    assert k.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)) == dp[-1][-1]
