import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bimcq.errors import ConfigError, NumericError, ShapeError
from bimcq.tensor import (
    Tensor, attend, cross_entropy, gradcheck, l2_normalize, relative_error, matmul, scaled_dot_attention, softmax, sum_,
)

from grad_cases import MODEL_CASES, OP_CASES
from oracles import attention_single

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity_and_zero(rng):
    b = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    np.testing.assert_array_equal(matmul(Tensor(np.zeros((2, 3))), Tensor(b)).data, np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([7.0] * 4)).data, [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([math.log(1.0), math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
def test_softmax_shift_invariance_and_simplex(x, c):
    p = softmax(Tensor(x)).data
    assert np.all(p > 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, p, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.nan]))
    with pytest.raises(NumericError):
        softmax(Tensor([np.inf, 1.0]))


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    assert cross_entropy(Tensor([31.0, 1.0, 1.0]), 0).item() < 1e-9
    assert cross_entropy(Tensor([1.0, 2.0, 3.0]), 0).item() == pytest.approx(2.407606, abs=5e-7)


def test_cross_entropy_gradient_is_softmax_minus_one_hot(rng):
    x = Tensor(rng.normal(size=5), requires_grad=True)
    cross_entropy(x, 3).backward()
    expected = np.exp(x.data) / np.exp(x.data).sum()
    expected[3] -= 1.0
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor([0.0, 1.0]), 2)
    with pytest.raises(IndexError):
        cross_entropy(Tensor([0.0, 1.0]), -1)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.data())
def test_cross_entropy_non_negative_and_ln_n_at_constant(x, data):
    t = data.draw(st.integers(0, len(x) - 1))
    ce = cross_entropy(Tensor(x), t).item()
    assert ce >= 0
    assert cross_entropy(Tensor(np.full(len(x), x[0])), t).item() == pytest.approx(math.log(len(x)), abs=1e-9)


def test_backward_linear_and_disconnected(rng):
    p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    sum_(p).backward()
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))
    q = Tensor(rng.normal(size=3), requires_grad=True)
    other = Tensor(rng.normal(size=3), requires_grad=True)
    sum_(q.detach() * other).backward()
    assert q.grad is None
    assert other.grad is not None


def test_backward_accumulates_and_constants_stay_clean(rng):
    p = Tensor(rng.normal(size=3), requires_grad=True)
    c = Tensor(rng.normal(size=3))
    sum_(p * c).backward()
    sum_(p * c).backward()
    np.testing.assert_allclose(p.grad, 2 * c.data)
    assert c.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_backward_reused_node(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = x * x
    sum_(y * y + y).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data**3 + 2 * x.data, atol=1e-12)


def test_backward_deep_chain_no_recursion_limit():
    x = Tensor(np.array([0.5]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    sum_(y).backward()
    assert x.grad[0] == 1.0


def test_l2_normalize_scale_invariant(rng):
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(l2_normalize(Tensor(5.0 * x)).data, l2_normalize(Tensor(x)).data, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(l2_normalize(Tensor(x)).data, axis=1), 1.0, atol=1e-15)


def test_attention_single_key_returns_value_row(rng):
    q, k, v = rng.normal(size=(1, 8)), rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), 2, w_o=Tensor(np.eye(8)))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_attention_identical_keys_average_values(rng):
    q = rng.normal(size=(1, 8))
    k = np.tile(rng.normal(size=(1, 8)), (3, 1))
    v = rng.normal(size=(3, 8))
    out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), 4)
    np.testing.assert_allclose(out.data[0], v.mean(axis=0), atol=1e-14)


def test_attention_matches_straight_line_oracle(rng):
    for _ in range(10):
        q, k, v = rng.normal(size=(1, 8)), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        ws = [rng.normal(size=(8, 8)) for _ in range(4)]
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), 2, *(Tensor(w) for w in ws))
        expected = attention_single(q[0], k, v, 2, *ws)
        assert np.max(np.abs(out.data[0] - expected)) < 1e-10


def test_attention_masking_ignores_padding(rng):
    q, k, v = rng.normal(size=(1, 8)), rng.normal(size=(1, 5, 8)), rng.normal(size=(1, 5, 8))
    full = attend(Tensor(q), Tensor(k[:, :3]), Tensor(v[:, :3]), 2).data
    k[:, 3:] = 1e3
    masked = attend(Tensor(q), Tensor(k), Tensor(v), 2, lengths=[3]).data
    np.testing.assert_allclose(masked, full, atol=1e-14)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError, match="heads"):
        scaled_dot_attention(Tensor(np.zeros((1, 6))), Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))), 4)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradcheck(name):
    for seed in range(5):
        loss, params = OP_CASES[name](np.random.default_rng([seed, 11]))
        errs = gradcheck(loss, params, step=1e-4)
        assert max(errs) <= 1e-4, (name, seed, errs)


@pytest.mark.parametrize("name", sorted(MODEL_CASES))
def test_model_forward_gradcheck(name):
    for seed in range(3):
        loss, params = MODEL_CASES[name](np.random.default_rng([seed, 12]))
        errs = gradcheck(loss, params, step=1e-4)
        assert max(errs) <= 1e-4, (name, seed, errs)


def test_relative_error_floor_handles_structural_zero():
    # a true zero gradient measured as roundoff on both sides
    assert relative_error(np.array([1e-16]), np.array([1e-12])) < 1e-4
    assert relative_error(np.array([1e-3]), np.array([1.1e-3])) == pytest.approx(0.1 / 1.1)
