import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permgen import tensor as tt
from permgen.tensor import Tape, Tensor


def grad_of(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` w.r.t. each input array."""
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def numeric_grad(fn, *arrays, h=1e-6):
    out = []
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (fn(*map(Tensor, plus)).item() - fn(*map(Tensor, minus)).item()) / (2 * h)
        out.append(g)
    return out


def assert_grads_match(fn, *arrays, tol=1e-6):
    for a, n in zip(grad_of(fn, *arrays), numeric_grad(fn, *arrays)):
        np.testing.assert_allclose(a, n, atol=tol, rtol=tol)


# -- hand oracles ------------------------------------------------------------


def test_matmul_hand_cases():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(tt.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    np.testing.assert_array_equal(tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data,
                                  [[3.0], [7.0]])
    np.testing.assert_array_equal(tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(6.0).reshape(3, 2))).data,
                                  np.zeros((2, 2)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(tt.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_softmax_hand_cases():
    np.testing.assert_allclose(tt.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(tt.softmax(Tensor([4.2])).data, [1.0])
    z = [math.exp(1), math.exp(2), math.exp(3)]
    oracle = [v / sum(z) for v in z]
    np.testing.assert_allclose(tt.softmax(Tensor([1.0, 2.0, 3.0])).data, oracle, rtol=1e-14)


def test_softmax_is_shift_stable_for_huge_logits():
    out = tt.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-15)


def test_cross_entropy_analytic_cases():
    big = np.full((2, 4), -50.0)
    big[0, 1] = big[1, 3] = 50.0
    assert tt.cross_entropy(Tensor(big), [1, 3]).item() == pytest.approx(0.0, abs=1e-40)
    V = 7
    assert tt.cross_entropy(Tensor(np.zeros((3, V))), [0, 4, 6]).item() == pytest.approx(math.log(V), rel=1e-15)


def test_cross_entropy_matches_scalar_logsumexp_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5))
    targets = [4, 0, 2]
    per_pos = []
    for row, t in zip(logits.tolist(), targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(x - m) for x in row))
        per_pos.append(lse - row[t])
    assert tt.cross_entropy(Tensor(logits), targets).item() == pytest.approx(sum(per_pos) / 3, abs=1e-12)


def test_cross_entropy_mask_excludes_positions():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 6))
    full = tt.cross_entropy(Tensor(logits[:2]), [1, 2]).item()
    masked = tt.cross_entropy(Tensor(logits), [1, 2, 3, 0], mask=[False, False, True, True]).item()
    assert masked == pytest.approx(full, abs=1e-15)
    with pytest.raises(tt.DimensionError):
        tt.cross_entropy(Tensor(logits), [1, 2, 3, 0], mask=[True] * 4)


def test_backward_analytic_cases():
    (g,) = grad_of(lambda t: tt.tensor_sum(t), np.array([3.0, -1.0, 2.0]))
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])
    (g,) = grad_of(lambda t: tt.tensor_sum(tt.mul(t, t)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_shared_input_gradients_accumulate():
    (g,) = grad_of(lambda t: tt.tensor_sum(tt.add(tt.mul(t, t), t)), np.array([1.0, -3.0]))
    np.testing.assert_array_equal(g, [3.0, -5.0])


# -- error surface -----------------------------------------------------------


def test_non_finite_construction_rejected():
    with pytest.raises(tt.NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(tt.NonFiniteError):
        Tensor([float("inf")])


def test_non_finite_result_rejected():
    with np.errstate(over="ignore"), pytest.raises(tt.NonFiniteError):
        tt.mul(Tensor([1e200]), Tensor([1e200]))


def test_empty_tensor_rejected():
    with pytest.raises(tt.DimensionError):
        Tensor(np.zeros((0, 3)))


def test_second_backward_on_same_tape_is_an_error():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tt.tensor_sum(tt.mul(w, w))
    tape.backward(loss)
    with pytest.raises(tt.UsageError):
        tape.backward(loss)


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = tt.mul(w, w)
    with pytest.raises(tt.DimensionError):
        tape.backward(y)


def test_loss_from_other_tape_rejected():
    w = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = tt.tensor_sum(tt.mul(w, w))
    with Tape() as other, pytest.raises(tt.UsageError):
        other.backward(loss)


def test_ops_outside_tape_are_not_recorded():
    w = Tensor([1.0], requires_grad=True)
    y = tt.mul(w, w)
    with pytest.raises(tt.UsageError):
        y.backward()


def test_item_on_vector_is_an_error():
    with pytest.raises(tt.DimensionError):
        Tensor([1.0, 2.0]).item()


# -- finite differences per op ----------------------------------------------

small = st.integers(min_value=1, max_value=4)


@settings(max_examples=25, deadline=None)
@given(m=small, k=small, n=small, seed=st.integers(0, 2**16))
def test_matmul_gradient(m, k, n, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(m, n))
    assert_grads_match(lambda a, b: tt.tensor_sum(tt.mul(tt.matmul(a, b), Tensor(w))),
                       rng.normal(size=(m, k)), rng.normal(size=(k, n)))


def test_batched_matmul_with_shared_right_operand_gradient():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 3, 4))
    assert_grads_match(lambda a, b: tt.tensor_sum(tt.mul(tt.matmul(a, b), Tensor(w))),
                       rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 4)))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_softmax_and_log_softmax_gradients(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, n))
    x = rng.normal(size=(2, n)) * 3
    assert_grads_match(lambda a: tt.tensor_sum(tt.mul(tt.softmax(a), Tensor(w))), x)
    assert_grads_match(lambda a: tt.tensor_sum(tt.mul(tt.log_softmax(a), Tensor(w))), x)


@settings(max_examples=25, deadline=None)
@given(L=st.integers(1, 5), V=st.integers(2, 6), seed=st.integers(0, 2**16))
def test_cross_entropy_gradient(L, V, seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, V, size=L)
    weights = rng.random(L)
    assert_grads_match(lambda a: tt.cross_entropy(a, targets), rng.normal(size=(L, V)))
    assert_grads_match(lambda a: tt.cross_entropy(a, targets, weights=weights), rng.normal(size=(L, V)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 5))
    assert_grads_match(lambda x, g, b: tt.tensor_sum(tt.mul(tt.layer_norm(x, g, b), Tensor(w))),
                       rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5), tol=1e-5)


def test_embedding_gradient_accumulates_repeated_ids():
    rng = np.random.default_rng(5)
    ids = np.array([[1, 3, 1], [0, 1, 3]])
    w = rng.normal(size=(2, 3, 4))
    table = rng.normal(size=(5, 4))
    (g,) = grad_of(lambda t: tt.tensor_sum(tt.mul(tt.embedding(t, ids), Tensor(w))), table)
    expected = np.zeros_like(table)
    for idx in np.ndindex(ids.shape):
        expected[ids[idx]] += w[idx]
    np.testing.assert_allclose(g, expected, rtol=1e-15)
    np.testing.assert_array_equal(g[2], 0.0)


def test_shape_ops_and_relu_gradients():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(3, 2, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the relu kink
    fn = lambda a: tt.tensor_sum(tt.mul(tt.transpose(tt.reshape(tt.relu(a), (3, 4)), (1, 0)), Tensor(w)))  # noqa: E731
    assert_grads_match(fn, x)


def test_concat_and_scale_gradients():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(2, 5))
    assert_grads_match(lambda a, b: tt.tensor_sum(tt.mul(tt.scale(tt.concat([a, b], axis=1), 0.5), Tensor(w))),
                       rng.normal(size=(2, 2)), rng.normal(size=(2, 3)))


def test_masked_fill_blocks_gradient():
    x = np.array([[1.0, 2.0, 3.0]])
    mask = np.array([[False, True, False]])
    (g,) = grad_of(lambda a: tt.tensor_sum(tt.softmax(tt.masked_fill(a, mask))), x)
    assert g[0, 1] == 0.0
    out = tt.softmax(tt.masked_fill(Tensor(x), mask)).data
    assert out[0, 1] == 0.0


def test_broadcast_add_gradient_reduces_to_bias_shape():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(2, 3, 4))
    assert_grads_match(lambda a, b: tt.tensor_sum(tt.mul(tt.add(a, b), Tensor(w))),
                       rng.normal(size=(2, 3, 4)), rng.normal(size=4))


def test_dropout_rate_zero_is_identity_and_scaling_is_unbiased():
    x = Tensor(np.ones(20000))
    assert tt.dropout(x, 0.0, np.random.default_rng(0)) is x
    assert tt.dropout(x, 0.5, None) is x
    out = tt.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert out.mean() == pytest.approx(1.0, abs=0.02)
