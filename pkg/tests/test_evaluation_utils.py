import numpy as np
import pytest

from errors import DataError, LabelError
from evaluation_utils import ConfusionMatrix, confusion_matrix, cost_counter, format_percent, measure_latency, metrics


def reference_metrics(counts):
    """Per-class loop recomputation of WA, UA and WF1."""
    total = counts.sum()
    wa = np.trace(counts) / total
    recalls, weighted_f1 = [], 0.0
    for k in range(counts.shape[0]):
        tp = counts[k, k]
        support = counts[k].sum()
        predicted = counts[:, k].sum()
        if support:
            recalls.append(tp / support)
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        weighted_f1 += f1 * support
    return wa, np.mean(recalls), weighted_f1 / total


def test_perfect_predictions():
    cm = confusion_matrix([0, 1, 2, 3, 1], [0, 1, 2, 3, 1], num_classes=4)
    assert metrics(cm) == (1.0, 1.0, 1.0)


def test_two_class_example():
    wa, ua, wf1 = metrics(ConfusionMatrix(np.array([[2, 0], [1, 1]])))
    assert wa == pytest.approx(0.75)
    assert ua == pytest.approx(0.75)
    assert wf1 == pytest.approx((0.8 * 2 + (2 / 3) * 2) / 4)


def test_unweighted_accuracy_skips_classes_without_support():
    cm = confusion_matrix([0, 0, 1], [0, 2, 1], num_classes=3)
    _, ua, _ = metrics(cm)
    assert ua == pytest.approx(0.75)


def test_random_matrices_match_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        num_classes = int(rng.integers(2, 8))
        counts = rng.integers(0, 20, size=(num_classes, num_classes))
        counts[0, 0] += 1
        expected = reference_metrics(counts.astype(np.float64))
        np.testing.assert_allclose(metrics(ConfusionMatrix(counts)), expected, atol=1e-9)


def test_metrics_do_not_depend_on_sample_order():
    rng = np.random.default_rng(1)
    true = rng.integers(0, 5, size=200)
    pred = rng.integers(0, 5, size=200)
    order = rng.permutation(200)
    assert metrics(confusion_matrix(true, pred, 5)) == metrics(confusion_matrix(true[order], pred[order], 5))


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 0, 2], num_classes=3)
    assert cm.to_list() == [[1, 0, 0], [1, 1, 0], [0, 0, 1]]
    assert cm.total == 4 and cm.num_classes == 3


def test_confusion_matrix_errors():
    with pytest.raises(DataError):
        confusion_matrix([0, 1], [0], num_classes=2)
    with pytest.raises(LabelError):
        confusion_matrix([0, 2], [0, 1], num_classes=2)
    with pytest.raises(LabelError):
        confusion_matrix([0, 1], [-1, 1], num_classes=2)


def test_empty_matrix_raises():
    with pytest.raises(DataError, match='empty'):
        metrics(confusion_matrix([], [], num_classes=4))


def test_cost_counter():
    assert cost_counter([]) == 0
    assert cost_counter([3, 4]) == 25
    assert cost_counter([2 * 128]) == 4 * cost_counter([128])


def test_format_percent():
    assert format_percent(0.123456) == '12.35'
    assert format_percent(1.0) == '100.00'


def test_measure_latency_returns_result_and_seconds():
    def add(a, b=0):
        return a + b

    result, latency = measure_latency(add)(2, b=3)
    assert result == 5
    assert latency >= 0
    assert measure_latency(add).__name__ == 'add'


def test_metrics_invariant_under_class_relabelling():
    rng = np.random.default_rng(2)
    counts = rng.integers(0, 15, size=(5, 5))
    relabel = rng.permutation(5)
    relabelled = counts[np.ix_(relabel, relabel)]
    np.testing.assert_allclose(metrics(ConfusionMatrix(counts)), metrics(ConfusionMatrix(relabelled)), atol=1e-12)
