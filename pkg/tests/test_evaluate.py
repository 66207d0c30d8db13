import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgnn import numcore as nc
from sdgnn.evaluate import MetricError, auroc, auroc_oracle, classification_metrics, tune_threshold


@pytest.mark.parametrize("scores, labels, expected", [
    ([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0], 1.0),
    ([0.9, 0.6, 0.4, 0.3], [1, 0, 1, 0], 0.75),
    ([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0], 0.5),
    ([0.7, 0.1], [1, 0], 1.0),
    ([0.3, 0.3], [1, 0], 0.5),
])
def test_auroc_examples(scores, labels, expected):
    assert auroc(scores, labels) == expected
    assert auroc_oracle(scores, labels) == expected


def random_instance(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = rng.integers(0, int(rng.integers(2, 30)), size=n) / 10.0
    return scores, labels


def test_auroc_matches_oracle_bitwise():
    rng = nc.make_rng(0)
    for _ in range(1000):
        scores, labels = random_instance(rng)
        assert auroc(scores, labels) == auroc_oracle(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auroc_monotone_invariance_and_complement(seed):
    rng = nc.make_rng(seed)
    scores, labels = random_instance(rng)
    a = auroc(scores, labels)
    assert auroc(np.exp(3 * scores) - 7, labels) == a
    assert auroc(scores, 1 - labels) + a == pytest.approx(1.0, abs=1e-15)


def test_single_class_is_an_error():
    with pytest.raises(MetricError, match="AUROC undefined"):
        auroc([0.1, 0.2], [1, 1])


def test_f1_worked_example():
    # TP=2, FP=1, FN=1, TN=6
    scores = [0.9, 0.8, 0.7, 0.2] + [0.1] * 6
    labels = [1, 1, 0, 1] + [0] * 6
    r = classification_metrics(scores, labels)
    assert (r.tp, r.fp, r.fn, r.tn, r.n) == (2, 1, 1, 6, 10)
    assert abs(r.precision - 2 / 3) <= 1e-12 and abs(r.recall - 2 / 3) <= 1e-12
    assert abs(r.f1 - 2 / 3) <= 1e-12


def test_f1_all_correct_and_degenerate():
    assert classification_metrics([0.9, 0.1], [1, 0]).f1 == 1.0
    r = classification_metrics([0.1, 0.2], [0, 0], with_auroc=False)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    assert r.tp + r.fp + r.tn + r.fn == r.n


@pytest.mark.parametrize("n_pos, n", [(1, 10), (3, 7), (50, 200)])
def test_f1_all_positive_predictions(n_pos, n):
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    r = classification_metrics(np.linspace(0.1, 0.9, n), labels, threshold=0.0)
    p = n_pos / n
    assert r.f1 == pytest.approx(2 * p / (p + 1), abs=1e-12)


def test_report_serialises_to_one_json_object():
    r = classification_metrics([0.9, 0.6, 0.4, 0.3], [1, 0, 1, 0])
    obj = json.loads(r.to_json())
    assert obj["auroc"] == 0.75 and obj["threshold"] == 0.5


def test_tuned_threshold_not_worse_than_default():
    rng = nc.make_rng(4)
    labels = rng.integers(0, 2, size=100)
    scores = np.clip(0.2 + 0.3 * labels + rng.normal(0, 0.2, size=100), 0, 1)
    t = tune_threshold(scores, labels)
    assert classification_metrics(scores, labels, t).f1 >= classification_metrics(scores, labels).f1
