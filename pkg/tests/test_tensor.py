import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pgfnet import tensor as T
from pgfnet.tensor import Tensor


def naive_matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    x = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)


def test_matmul_annihilating():
    assert np.array_equal(T.matmul(Tensor([[1, 0]]), Tensor([[0], [5]])).data, [[0.0]])


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_rules(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    T.backward(T.sum(T.mul(T.matmul(a, b), w)))
    np.testing.assert_allclose(a.grad, w @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ w, atol=1e-12)


@given(st.integers(0, 2**31))
def test_matmul_associativity(seed):
    r = np.random.default_rng(seed)
    a, b, c = (Tensor(r.uniform(-1, 1, size=s)) for s in ((3, 4), (4, 5), (5, 2)))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    assert np.abs(left - right).max() < 1e-9


def test_batched_matmul_weight_gradient(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert T.grad_check(lambda: T.sum(T.mul(T.matmul(a, w), T.matmul(a, w))), [a, w]) < 1e-7


# ----------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stable_on_large_logits():
    p = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300


def test_softmax_mask_renormalizes():
    p = T.softmax_lastdim(Tensor([1.0, 2.0, 3.0]), mask=[True, True, False]).data
    e1, e2 = math.exp(1), math.exp(2)
    np.testing.assert_allclose(p, [e1 / (e1 + e2), e2 / (e1 + e2), 0.0], atol=1e-15)
    assert p[2] == 0.0


def test_softmax_fully_masked_row_errors():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(T.ContractError, match=r"\(1,\)"):
        T.softmax_lastdim(x, mask=np.array([[1, 0], [0, 0], [1, 1]], bool))


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
       arrays(np.bool_, (4, 6)))
def test_softmax_rows_sum_to_one_and_masked_zero(x, mask):
    mask[:, 0] = True
    p = T.softmax_lastdim(Tensor(x), mask).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-9)
    assert np.all(p[~mask] == 0.0)


# --------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_collapses_to_bias():
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5).data
    assert np.array_equal(out, np.zeros(3))


def test_layer_norm_already_normalized():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-12)


def test_layer_norm_zero_gain_gives_bias(rng):
    bias = rng.normal(size=4)
    out = T.layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(bias), 1e-5).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (3, 4)))


def test_layer_norm_statistics(rng):
    out = T.layer_norm(Tensor(rng.normal(3, 5, size=(5, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-9)


def test_layer_norm_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=(2, 3, 5))
    assert T.grad_check(lambda: T.sum(T.mul(T.layer_norm(x, g, b, 1e-5), w)), [x, g, b]) < 1e-6


# --------------------------------------------------------------- activations

def test_sigmoid_and_relu_points():
    assert T.activation("sigmoid", Tensor(0.0)).item() == 0.5
    assert T.activation("relu", Tensor(-3.0)).item() == 0.0
    assert T.activation("relu", Tensor(3.0)).item() == 3.0


def test_sigmoid_saturation_without_overflow():
    hi, lo = T.sigmoid(Tensor([20.0])).item(), T.sigmoid(Tensor([-20.0])).item()
    assert abs(hi - 1.0) < 1e-8 and abs(lo) < 1e-8
    assert np.all(np.isfinite(T.sigmoid(Tensor([-1000.0, 1000.0])).data))


def test_unknown_activation():
    with pytest.raises(ValueError):
        T.activation("tanh", Tensor(0.0))


# ------------------------------------------------------------------- concat

def test_concat_seq_order():
    assert np.array_equal(T.concat_seq(Tensor([[1.0]]), Tensor([[2.0]])).data, [[1.0], [2.0]])


def test_concat_seq_empty_identity(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(T.concat_seq(Tensor(np.zeros((0, 4))), Tensor(x)).data, x)


def test_concat_seq_shapes_and_gradient(rng):
    a = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    out = T.concat_seq(a, b)
    assert out.shape == (8, 8)
    w = rng.normal(size=(8, 8))
    T.backward(T.sum(T.mul(out, w)))
    np.testing.assert_array_equal(a.grad, w[:3])
    np.testing.assert_array_equal(b.grad, w[3:])


def test_concat_seq_trailing_mismatch():
    with pytest.raises(T.DimensionError):
        T.concat_seq(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# ------------------------------------------------------------ broadcasting

def test_bias_broadcast_only_on_last_axis(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert (x + Tensor(np.ones(3))).shape == (2, 3)
    with pytest.raises(T.DimensionError):
        x + Tensor(np.ones((1, 3)))
    with pytest.raises(T.DimensionError):
        x * Tensor(np.ones(2))


# ----------------------------------------------------------------- backward

def test_backward_identity():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x)
    assert x.grad == 1.0


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_fan_out_is_exact():
    x = Tensor(1.7, requires_grad=True)
    T.backward(x + x)
    assert x.grad == 2.0


def test_backward_diamond_visits_each_node_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * 3.0
    z = T.sum(T.mul(y, y) + y)   # dz/dx = (2y + 1) * 3
    T.backward(z)
    assert x.grad == (2 * 6.0 + 1) * 3


def test_backward_leaves_constants_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    T.backward(T.sum(T.mul(x, c)))
    assert c.grad is None


def test_backward_non_scalar_errors():
    with pytest.raises(T.ContractError):
        T.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ------------------------------------------------------------------ dropout

def test_dropout_identity_in_eval_mode(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    with T.evaluating():
        assert T.dropout(x, 0.5, rng) is x
    assert T.is_training()


def test_dropout_masks_and_rescales():
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs((y == 0).mean() - 0.25) < 0.02


# --------------------------------------------------------------- grad check

def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    assert T.grad_check(lambda: T.sum(T.mul(x, x)), [x], 1e-5) < 1e-9


def test_grad_check_gate_composition(rng):
    ht = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    hc = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    target = rng.normal(size=(2, 3, 4))

    def f():
        g = T.sigmoid(T.matmul(T.concat([ht, hc], axis=-1), w) + b)
        fused = T.mul(g, ht) + T.mul(1.0 - g, hc)
        return T.sum(T.mul(fused, target))

    assert T.grad_check(f, [ht, hc, w, b], 1e-5) < 1e-5


def test_grad_check_detects_nondeterminism():
    x = Tensor([1.0], requires_grad=True)
    r = np.random.default_rng(0)
    with pytest.raises(T.ContractError):
        T.grad_check(lambda: T.sum(x * float(r.normal())), [x])


def test_grad_check_rejects_eps_out_of_range():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum(x), [x], eps=1e-2)


ops = st.sampled_from(["sigmoid", "relu_shift", "softmax", "layer_norm", "matmul", "concat"])


@given(st.lists(ops, min_size=1, max_size=4), st.integers(0, 2**31))
def test_composed_expressions_pass_grad_check(chain, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(r.normal(size=(4, 4)) / 2, requires_grad=True)
    gain = Tensor(r.normal(size=4), requires_grad=True)
    extra = Tensor(r.normal(size=(2, 4)), requires_grad=True)
    weights = r.normal(size=(3 + 2 * chain.count("concat"), 4))

    def f():
        h = x
        for op in chain:
            if op == "sigmoid":
                h = T.sigmoid(h)
            elif op == "relu_shift":
                # shift keeps inputs clear of the kink relative to eps
                h = T.relu(h + 5.0)
            elif op == "softmax":
                h = T.softmax_lastdim(h)
            elif op == "layer_norm":
                h = T.layer_norm(h, gain, Tensor(np.zeros(4)), 1e-5)
            elif op == "matmul":
                h = T.matmul(h, w)
            else:
                h = T.concat_seq(h, extra)
        return T.sum(T.mul(h, weights))

    assert T.grad_check(f, [x, w, gain, extra], 1e-5) < 1e-4


def test_convex_mix_stays_in_hull_and_grads(rng):
    g = T.sigmoid(Tensor(rng.normal(size=(4, 5)) * 4, requires_grad=True))
    a, b = Tensor(rng.normal(size=(4, 5)), requires_grad=True), Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    out = T.convex_mix(g, a, b).data
    assert np.all(out >= np.minimum(a.data, b.data)) and np.all(out <= np.maximum(a.data, b.data))
    w = rng.normal(size=(4, 5))
    z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert T.grad_check(lambda: T.sum(T.mul(T.convex_mix(T.sigmoid(z), a, b), w)), [z, a, b]) < 1e-6


def test_convex_mix_rounding_overshoot_is_pinned():
    # g * x + (1 - g) * x rounds to a value below x for this pair
    g, x = 0.8954739071476481, -0.35896064670446953
    assert g * x + (1 - g) * x != x
    assert T.convex_mix(Tensor([g]), Tensor([x]), Tensor([x])).data[0] == x
