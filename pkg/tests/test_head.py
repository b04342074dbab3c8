import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lapa import tensor as T
from lapa.attention import Projection
from lapa.head import (
    CombineWeights,
    accuracy_report,
    bce_loss,
    check_one_hot,
    classify,
    combine,
    one_hot,
    total_loss,
)
from lapa.tensor import Tensor, grad_check

from oracles import matmul_loops


@pytest.fixture
def feats(rng):
    return Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))


def test_alpha_only_is_pooled_integrated(feats):
    ii, fi, fl = feats
    out = combine(ii, fi, fl, CombineWeights(1.0, 0.0, 0.0)).data
    np.testing.assert_array_equal(out, T.mean_tokens(ii).data)


def test_all_zero_weights(feats):
    assert not combine(*feats, CombineWeights(0.0, 0.0, 0.0)).data.any()


def test_default_weights_hand_computed():
    ii = Tensor([[1.0, 2.0], [3.0, 4.0]])  # mean [2, 3]
    fi = Tensor([[10.0, 0.0]])  # mean [10, 0]
    fl = Tensor([[0.0, 20.0], [0.0, 0.0], [5.0, 5.0]])  # masked mean over rows 0,1 -> [0, 10]
    mask = np.array([True, True, False])
    out = combine(ii, fi, fl, CombineWeights(), mask).data
    np.testing.assert_allclose(out, [2.0 + 1.0 + 0.0, 3.0 + 0.0 + 1.0], atol=1e-15)


def test_weights_validated():
    with pytest.raises(ValueError):
        CombineWeights(-1.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        CombineWeights(1.0, float("nan"), 0.1)


def test_combine_width_mismatch(rng):
    with pytest.raises(ValueError):
        combine(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), CombineWeights())


def test_classify_cases(rng):
    b = np.array([0.5, -1.0, 2.0])
    head = Projection(T.parameter(np.zeros((4, 3))), T.parameter(b))
    np.testing.assert_array_equal(classify(Tensor(rng.normal(size=4)), head).data, b)
    single = Projection(T.parameter(rng.normal(size=(4, 1))), T.parameter([0.3]))
    assert classify(Tensor(rng.normal(size=4)), single).shape == (1,)
    x, w, bias = np.array([[1.0, -2.0]]), np.array([[0.5, 1.0], [2.0, -1.0]]), np.array([0.1, 0.2])
    out = classify(Tensor(x), Projection(T.parameter(w), T.parameter(bias))).data
    np.testing.assert_allclose(out, matmul_loops(x.tolist(), w.tolist()) + bias, atol=1e-15)


def test_bce_at_zero_logits_is_ln2():
    for k in range(3):
        assert bce_loss(Tensor(np.zeros(3)), one_hot(k, 3)).item() == pytest.approx(np.log(2), abs=1e-15)


def test_bce_saturates():
    logits = np.full(5, -40.0)
    logits[2] = 40.0
    loss = bce_loss(Tensor(logits), one_hot(2, 5)).item()
    assert 0 < loss < 1e-10


@given(hnp.arrays(np.float64, 6, elements=st.floats(-20, 20)), st.integers(0, 5))
def test_stable_matches_naive_form(x, k):
    y = one_hot(k, 6)
    # 1 - sigmoid(x) written as sigmoid(-x) so the reference itself stays accurate at |x| = 20
    naive = np.mean(-(y * np.log(1 / (1 + np.exp(-x))) + (1 - y) * np.log(1 / (1 + np.exp(x)))))
    stable = bce_loss(Tensor(x), y).item()
    assert stable > 0
    assert abs(stable - naive) < 1e-9


def test_bce_rejects_non_one_hot():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros(3)), np.array([1.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        check_one_hot(np.array([0.5, 0.5]))


def test_bce_grad_check(rng):
    x = T.parameter(rng.normal(size=(2, 5)) * 3)
    y = one_hot(np.array([1, 4]), 5)
    results = grad_check(lambda: bce_loss(x, y), {"x": x}, tol=1e-6)
    assert results[0].passed, results[0].max_rel_error


def test_total_loss_arithmetic():
    bce, cs = Tensor(0.5), Tensor(1.0)
    assert total_loss(bce, cs, 0.0).item() == 0.5
    assert total_loss(bce, cs, 0.1).item() == pytest.approx(0.6, abs=1e-15)
    assert total_loss(bce, Tensor(2.0), 1.0).item() == pytest.approx(2.5)
    assert total_loss(bce, None, 0.1).item() == 0.5


@given(hnp.arrays(np.float64, 7, elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_argmax_shift_invariance(x, c):
    x = x + np.arange(7) * 1e-3  # break exact ties
    assert np.argmax(x) == np.argmax(x + c) or np.isclose(np.sort(x)[-1], np.sort(x)[-2])


def test_accuracy_cases():
    r = accuracy_report([0, 1, 2], [0, 1, 2], ["open", "closed", "open"])
    assert (r.open_acc, r.closed_acc, r.overall_acc) == (100.0, 100.0, 100.0)
    r = accuracy_report([1, 0], [1, 1], ["closed", "closed"])
    assert r.open_acc is None and r.closed_acc == r.overall_acc == 50.0
    r = accuracy_report([3, 4, 0, 1], [3, 5, 0, 1], ["open", "open", "closed", "closed"])
    assert (r.open_acc, r.closed_acc, r.overall_acc, r.n_open, r.n_closed) == (50.0, 100.0, 75.0, 2, 2)
    assert set(json.loads(r.to_json())) == {"open_acc", "closed_acc", "overall_acc", "n_open", "n_closed"}
    with pytest.raises(ValueError):
        accuracy_report([], [], [])
