import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leco.metrics import evaluate_at_level, mean_class_accuracy, predict_at_level
from leco.model import init_model
from leco.ontology import Taxonomy


def test_class_balanced_mean():
    pred = np.array([0, 0, 0, 0] + [0] * 100)
    truth = np.array([0, 0, 1, 1] + [0] * 100)
    assert mean_class_accuracy(pred, truth, 2)[0] == 0.5


def test_absent_classes_are_excluded():
    macc, per = mean_class_accuracy([0, 2], [0, 2], 3)
    assert macc == 1.0 and np.isnan(per[1])


def test_errors():
    with pytest.raises(ValueError):
        mean_class_accuracy([], [], 3)
    with pytest.raises(ValueError):
        mean_class_accuracy([0], [3], 3)
    with pytest.raises(ValueError):
        mean_class_accuracy([0, 1], [0], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_matches_counting_oracle(k, n, seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, k, n), rng.integers(0, k, n)
    accs = []
    for c in range(k):
        idx = [i for i in range(n) if truth[i] == c]
        if idx:
            accs.append(sum(pred[i] == c for i in idx) / len(idx))
    assert mean_class_accuracy(pred, truth, k)[0] == pytest.approx(sum(accs) / len(accs), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_duplicating_a_class_leaves_macc_unchanged(k, seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, k, 60), rng.integers(0, k, 60)
    c = int(truth[0])
    sel = truth == c
    t2 = np.concatenate([truth, truth[sel]])
    p2 = np.concatenate([pred, pred[sel]])
    assert mean_class_accuracy(p2, t2, k)[0] == pytest.approx(mean_class_accuracy(pred, truth, k)[0], abs=1e-12)


def test_balanced_set_macc_is_plain_accuracy():
    rng = np.random.default_rng(1)
    truth = np.repeat(np.arange(5), 7)
    pred = rng.integers(0, 5, len(truth))
    assert mean_class_accuracy(pred, truth, 5)[0] == pytest.approx((pred == truth).mean())


def test_coarse_prediction_is_argmax_of_child_sums():
    rng = np.random.default_rng(2)
    tax = Taxonomy.random([3, 5, 9], rng)
    model = init_model(4, [3, 5, 9], rng, (6,))
    x = rng.normal(size=(50, 4))
    q = model.predict_proba(x, 2)
    for level in (0, 1):
        brute = []
        for row in q:
            sums = np.zeros(tax.level_sizes[level])
            for c, p in enumerate(row):
                a = c
                for lvl in range(2, level, -1):
                    a = tax.parent(a, lvl)
                sums[a] += p
            brute.append(np.argmax(sums))
        np.testing.assert_array_equal(predict_at_level(model, x, tax, level), brute)
    np.testing.assert_array_equal(predict_at_level(model, x, tax, 2), np.argmax(q, axis=1))


def test_fine_correct_implies_coarse_correct():
    rng = np.random.default_rng(3)
    tax = Taxonomy.random([2, 6], rng)
    model = init_model(3, [2, 6], rng, (5,))
    model.ema["g1.W"] *= 1e4  # effectively one-hot predictions
    x = rng.normal(size=(40, 3))
    fine = predict_at_level(model, x, tax, 1)
    assert evaluate_at_level(model, x, fine, tax, 1) == 1.0
    assert evaluate_at_level(model, x, fine, tax, 0) == 1.0


def test_level_out_of_range():
    rng = np.random.default_rng(4)
    tax = Taxonomy.balanced([2, 2])
    model = init_model(2, [2, 4], rng, (3,))
    with pytest.raises(ValueError):
        evaluate_at_level(model, np.zeros((1, 2)), np.array([0]), tax, 2)
