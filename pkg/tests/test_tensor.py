import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from treatnet import tensor as T
from treatnet.tensor import Tensor, backward, grad_check


def rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


# ------------------------------------------------------------------ matmul

def test_matmul_identity_exact():
    m = np.array([[1.5, -2.0], [0.25, 7.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert grad_check(lambda: T.sum_all(T.matmul(a, b)), [a, b]) < 1e-7


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batched_weight_broadcast_gradient():
    rng = np.random.default_rng(1)
    x, w = rand(rng, 3, 2, 4), rand(rng, 4, 5)
    assert grad_check(lambda: T.sum_all(T.mul(T.matmul(x, w), T.matmul(x, w))), [x, w]) < 1e-6


# ----------------------------------------------------------------- softmax

def test_softmax_zero_row_is_uniform():
    assert np.allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25, atol=0)


def test_softmax_closed_form():
    out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    big = T.softmax_rows(Tensor([[1000.0, 1001.0]])).data
    small = T.softmax_rows(Tensor([[0.0, 1.0]])).data
    assert np.all(np.isfinite(big))
    assert np.array_equal(big, small)


@settings(deadline=None, max_examples=60)
@given(
    x=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
             elements=st.floats(-50, 50, allow_nan=False)),
    shift=st.floats(-100, 100, allow_nan=False),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    q = T.softmax_rows(Tensor(x + shift)).data
    assert np.allclose(p, q, atol=1e-12, rtol=0)


def test_softmax_masked_entries_get_zero_weight():
    x = T.masked_fill(Tensor([[1.0, 2.0, 3.0]]), np.array([[False, True, False]]), -np.inf)
    p = T.softmax_rows(x).data
    assert p[0, 1] == 0.0
    assert np.isclose(p.sum(), 1.0)


# -------------------------------------------------------------- layer norm

def _ln(x, eps=T.LN_EPS):
    d = x.shape[-1]
    return T.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)


def test_layer_norm_constant_vector_maps_to_zero():
    assert np.array_equal(_ln(Tensor(np.full(5, 3.0))).data, np.zeros(5))


def test_layer_norm_two_element_closed_form():
    assert np.allclose(_ln(Tensor([1.0, 3.0]), eps=1e-14).data, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_rejects_scalar_width():
    with pytest.raises(T.ShapeError):
        _ln(Tensor([[1.0], [2.0]]))


def test_layer_norm_gradient_check():
    rng = np.random.default_rng(2)
    x, g, b = rand(rng, 8), rand(rng, 8), rand(rng, 8)
    w = Tensor(rng.normal(size=8))
    f = lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), w))
    assert grad_check(f, [x, g, b]) < 1e-7


@settings(deadline=None, max_examples=60)
@given(x=arrays(np.float64, st.integers(2, 16), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_layer_norm_pre_affine_moments(x):
    if x.std() < 1e-3:
        return
    # eps -> 0 limit; with the default eps=1e-5 the variance is var/(var+eps) by construction
    y = _ln(Tensor(x), eps=1e-14).data
    assert abs(y.mean()) < 1e-10
    assert abs(y.var() - 1.0) < 1e-8


# ----------------------------------------------------------- elementwise

def test_sigmoid_relu_concat_basics():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    assert T.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    out = T.concat_last_dim([Tensor([1.0, 2.0]), Tensor([3.0, 4.0, 5.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_sigmoid_extreme_inputs_are_finite():
    s = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert s.tolist() == [0.0, 1.0]


def test_binary_ops_reject_mismatched_shapes():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


# --------------------------------------------------------------------- bce

def test_bce_at_zero_logit():
    assert math.isclose(float(T.bce_with_logits(Tensor([0.0]), [1.0]).data), math.log(2.0), rel_tol=1e-15)


def test_bce_saturated_logit_is_finite_and_small():
    v = float(T.bce_with_logits(Tensor([50.0]), [1.0]).data)
    assert math.isfinite(v) and 0.0 <= v < 1e-20


def test_bce_gradient_is_sigmoid_minus_label_over_n():
    rng = np.random.default_rng(3)
    z = rand(rng, 16)
    y = (rng.random(16) < 0.5).astype(float)
    backward(T.bce_with_logits(z, y))
    expected = (1.0 / (1.0 + np.exp(-z.data)) - y) / 16
    assert np.max(np.abs(z.grad - expected)) < 1e-10


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        T.bce_with_logits(Tensor([0.0, 1.0]), [0.5, 1.0])


@settings(deadline=None, max_examples=100)
@given(z=st.floats(-12, 12, allow_nan=False), y=st.sampled_from([0.0, 1.0]))
def test_bce_matches_naive_formula(z, y):
    s = 1.0 / (1.0 + math.exp(-z))
    naive = -(y * math.log(s) + (1 - y) * math.log(1 - s))
    assert abs(float(T.bce_with_logits(Tensor([z]), [y]).data) - naive) < 1e-9


# ---------------------------------------------------------------- backward

def test_backward_of_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b, c = rand(rng, 2, 3), rand(rng, 3, 4), rand(rng, 4, 2)
    assert grad_check(lambda: T.sum_all(T.matmul(T.matmul(a, b), c)), [a, b, c]) < 1e-7


def test_backward_leaves_disconnected_tensor_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    other = Tensor([3.0], requires_grad=True)
    backward(T.sum_all(x))
    assert other.grad is None


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum_all(T.scale(x, 3.0)))
    backward(T.sum_all(T.scale(x, 3.0)))
    assert x.grad.tolist() == [6.0, 6.0]


def test_backward_shared_subexpression_counts_both_paths():
    x = Tensor([2.0], requires_grad=True)
    y = T.mul(x, x)
    backward(T.sum_all(T.add(y, y)))
    assert x.grad.tolist() == [8.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(3), requires_grad=True))


# -------------------------------------------------------------- grad_check

def test_grad_check_sigmoid():
    x = Tensor(np.linspace(-3, 3, 7), requires_grad=True)
    assert grad_check(lambda: T.sum_all(T.sigmoid(x)), [x]) < 1e-8


def test_grad_check_constant_function_is_exactly_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert grad_check(lambda: Tensor(5.0), [x]) == 0.0


def _random_op_cases(rng):
    """Scalar-valued closures exercising each registered op once, with random dims <= 16."""
    n, m, k = (int(v) for v in rng.integers(2, 17, size=3))
    a, b = rand(rng, n, k), rand(rng, k, m)
    v1, v2 = rand(rng, n), rand(rng, n)
    g, be = rand(rng, k), rand(rng, k)
    w_nm = Tensor(rng.normal(size=(n, m)))
    w_nk = Tensor(rng.normal(size=(n, k)))
    y = (rng.random(n) < 0.5).astype(float)
    mask = rng.random((n, k)) < 0.3
    mask[:, 0] = False
    idx = rng.integers(0, n, size=(3,))
    w_cat = Tensor(rng.normal(size=(n, k + m)))
    return {
        "matmul": (lambda: T.sum_all(T.mul(T.matmul(a, b), w_nm)), [a, b]),
        "add": (lambda: T.sum_all(T.mul(T.add(a, g), w_nk)), [a, g]),
        "mul": (lambda: T.sum_all(T.mul(v1, v2)), [v1, v2]),
        "scale": (lambda: T.sum_all(T.mul(T.scale(a, -1.7), w_nk)), [a]),
        "relu": (lambda: T.sum_all(T.mul(T.relu(T.add(a, Tensor(0.05))), w_nk)), [a]),
        "sigmoid": (lambda: T.sum_all(T.mul(T.sigmoid(a), w_nk)), [a]),
        "tanh": (lambda: T.sum_all(T.mul(T.tanh(a), w_nk)), [a]),
        "softmax": (lambda: T.sum_all(T.mul(T.softmax_rows(T.masked_fill(a, mask, -np.inf)), w_nk)), [a]),
        "layer_norm": (lambda: T.sum_all(T.mul(T.layer_norm(a, g, be), w_nk)), [a, g, be]),
        "standardize": (lambda: T.sum_all(T.mul(T.standardize(v1)[0], v2.detach())), [v1]),
        "mean": (lambda: T.sum_all(T.mul(T.mean(a, axis=0), T.sigmoid(g).detach())), [a]),
        "concat": (lambda: T.sum_all(T.mul(T.concat_last_dim([a, T.matmul(a, b)]), w_cat)), [a, b]),
        "transpose": (lambda: T.sum_all(T.matmul(T.transpose(a), w_nm)), [a]),
        "reshape": (lambda: T.sum_all(T.mul(T.reshape(a, (k, n)), T.transpose(w_nk))), [a]),
        "take_rows": (lambda: T.sum_all(T.mul(T.take_rows(a, idx), Tensor(np.ones((3, k))))), [a]),
        "bce": (lambda: T.bce_with_logits(v1, y), [v1]),
    }


def test_every_op_passes_gradient_check_on_random_trials():
    rng = np.random.default_rng(1234)
    worst = {}
    for _ in range(100):
        for name, (f, inputs) in _random_op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, inputs))
    bad = {k: v for k, v in worst.items() if v >= 1e-6}
    assert not bad, bad
