import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lapa import tensor as T
from lapa.tensor import ComputationTape, ContractError, NonDeterminismError, ShapeError, Tensor, grad_check, parameter

from oracles import layer_norm_row, matmul_loops


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_reference_values():
    # frozen from oracles.matmul_loops
    expected = matmul_loops([[1, 2], [3, 4]], [[5, 6], [7, 8]])
    np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]])).data, expected)


def test_matmul_zeros_annihilate(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    assert not T.matmul(a, Tensor(np.zeros((4, 2)))).data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_matches_loops_random(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a.tolist(), b.tolist()), atol=1e-12)


def test_batched_matmul_with_shared_weight(rng):
    a, w = rng.normal(size=(3, 5, 4)), rng.normal(size=(4, 2))
    out = T.matmul(Tensor(a), Tensor(w)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], matmul_loops(a[i].tolist(), w.tolist()), atol=1e-12)


# -- softmax / layer norm ----------------------------------------------------


def test_softmax_symmetric_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_ln2_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    a = T.softmax_rows(Tensor(x)).data
    b = T.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_constant_row_maps_to_zero():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_pm1_row():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [layer_norm_row([1.0, -1.0], [1, 1], [0, 0])], atol=1e-15)
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_zero_gain_gives_bias(rng):
    b = np.array([0.5, -2.0, 1.0])
    out = T.layer_norm(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (4, 1)))


def test_layer_norm_needs_two_features():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


# -- backward ----------------------------------------------------------------


def test_backward_sum_of_squares():
    x = parameter([1.0, 2.0, 3.0])
    T.sum_all(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_sum_of_product():
    a = parameter(np.eye(2))
    b = parameter([[1.0, 2.0], [3.0, 4.0]])
    T.sum_all(T.matmul(a, b)).backward()
    np.testing.assert_array_equal(b.grad, np.ones((2, 2)))
    # d/dA sum(AB) = 1 B^T
    np.testing.assert_array_equal(a.grad, [[3, 7], [3, 7]])


def test_leaf_off_tape_keeps_zero_grad():
    x, y = parameter([1.0, 2.0]), parameter([5.0])
    T.sum_all(x).backward()
    assert not y.grad.any()


def test_backward_accumulates_without_reset():
    x = parameter([1.0, -1.0])
    loss = T.sum_all(T.scale(x, 3.0))
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [6, 6])
    x.zero_grad()
    assert not x.grad.any()


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_independent_subgraphs_backward(rng):
    a, b = parameter(rng.normal(size=3)), parameter(rng.normal(size=(2, 2)))
    T.sum_all(a * a).backward()
    T.sum_all(T.matmul(b, b)).backward()
    ga, gb = a.grad.copy(), b.grad.copy()
    a.zero_grad(), b.zero_grad()
    (T.sum_all(a * a) + T.sum_all(T.matmul(b, b))).backward()
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad.ravel()]), np.concatenate([ga, gb.ravel()]))


def test_tape_is_topological(rng):
    x = parameter(rng.normal(size=(2, 2)))
    y = T.gelu(T.matmul(x, x))
    z = T.sum_all(y + x)
    tape = ComputationTape.record(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_validate_flags_nan():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan]).validate()


# -- gradient checks of every op ---------------------------------------------


def _check(f, params, tol=1e-6):
    results = grad_check(f, params, h=1e-5, tol=tol)
    worst = max(r.max_rel_error for r in results)
    assert all(r.passed for r in results), worst


def test_grad_check_square():
    x = parameter([1.0])
    (r,) = grad_check(lambda: T.sum_all(x * x), {"x": x}, h=1e-5, tol=1e-9)
    np.testing.assert_allclose(x.grad, [2.0])
    assert r.max_rel_error < 1e-9 and r.passed


def test_grad_check_zero_tolerance_fails():
    x = parameter([0.3, -0.7])
    (r,) = grad_check(lambda: T.sum_all(T.gelu(x)), {"x": x}, tol=0.0)
    assert not r.passed
    assert r.max_rel_error >= 0.0


def test_grad_check_detects_nondeterminism():
    x = parameter([1.0])
    noise = iter(np.linspace(0, 1, 100))
    with pytest.raises(NonDeterminismError):
        grad_check(lambda: T.sum_all(x) + next(noise), {"x": x})


UNARY = {
    "gelu": T.gelu,
    "elu": T.elu,
    "leaky_relu": T.leaky_relu,
    "exp": T.exp,
    "softmax": T.softmax_rows,
    "transpose": T.transpose,
    "scale": lambda x: T.scale(x, -1.7),
    "mean_tokens": T.mean_tokens,
    "sqrt": lambda x: T.sqrt(x * x + 1.0),
    "clip": lambda x: T.clip(x, -0.5, 0.7),
    "reshape": lambda x: T.reshape(x, (2, 2, 3)),
    "permute": lambda x: T.permute(T.reshape(x, (2, 2, 3)), (2, 0, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_grad_check(name, rng):
    x = parameter(rng.normal(size=(4, 3)))
    # avoid the kinks of piecewise ops
    for kink in (0.0, -0.5, 0.7):
        x.data[np.abs(x.data - kink) < 1e-3] += 0.01
    w = Tensor(rng.normal(size=UNARY[name](x).shape))
    _check(lambda: T.sum_all(UNARY[name](x) * w), {"x": x})


def test_binary_ops_grad_check(rng):
    a = parameter(rng.normal(size=(2, 4, 4)))
    b = parameter(rng.normal(size=(4, 4)))
    c = parameter(rng.normal(size=(4, 1)) + 3.0)

    def f():
        y = T.div(T.matmul(a, b) + T.transpose(b), c)
        return T.sum_all(T.sub(T.mul(y, y), T.scale(y, 0.5)))

    _check(f, {"a": a, "b": b, "c": c})


def test_layer_norm_grad_check(rng):
    x = parameter(rng.normal(size=(2, 3, 5)))
    g = parameter(rng.normal(size=5))
    b = parameter(rng.normal(size=5))
    w = Tensor(rng.normal(size=(2, 3, 5)))
    _check(lambda: T.sum_all(T.layer_norm(x, g, b) * w), {"x": x, "g": g, "b": b})


def test_concat_embedding_masked_mean_grad_check(rng):
    table = parameter(rng.normal(size=(6, 4)))
    extra = parameter(rng.normal(size=(2, 4)))
    ids = np.array([[1, 5, 0], [2, 2, 3]])
    mask = np.array([[True, True, False], [True, True, True]])
    w = Tensor(rng.normal(size=(2, 4)))

    def f():
        x = T.concat([T.embedding(table, ids), extra], axis=-2)
        m = np.concatenate([mask, np.ones((2, 2), bool)], axis=-1)
        return T.sum_all(T.mean_tokens(x, m) * w)

    _check(f, {"table": table, "extra": extra})


def test_batched_matmul_grad_check(rng):
    a = parameter(rng.normal(size=(3, 2, 4)))
    b = parameter(rng.normal(size=(3, 4, 2)))
    w = parameter(rng.normal(size=(2, 5)))
    _check(lambda: T.sum_all(T.gelu(T.matmul(T.matmul(a, b), w))), {"a": a, "b": b, "w": w})


def test_corrupted_backward_is_detected(monkeypatch, rng):
    x = parameter(rng.normal(size=(3, 3)))
    monkeypatch.setattr(T, "_gelu_grad", lambda v: np.ones_like(v))
    results = grad_check(lambda: T.sum_all(T.gelu(x)), {"x": x}, tol=1e-6)
    assert not results[0].passed


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(parameter(np.ones((3, 2))), np.array([3]))


def test_unbroadcast_gradient_of_shared_bias(rng):
    x = Tensor(rng.normal(size=(4, 3, 2)))
    b = parameter(np.zeros(2))
    T.sum_all(x + b).backward()
    np.testing.assert_array_equal(b.grad, [12.0, 12.0])
