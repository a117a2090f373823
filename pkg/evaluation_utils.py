import time
import functools
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from errors import DataError, LabelError


@dataclass
class ConfusionMatrix:
    """E x E counts, rows are true classes and columns are predictions."""
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self):
        return self.counts.astype(int).tolist()


def confusion_matrix(true: Sequence[int], pred: Sequence[int], num_classes: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise DataError(f"confusion_matrix: {len(true)} labels vs {len(pred)} predictions")
    for name, values in (('true', true), ('predicted', pred)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise LabelError(f"confusion_matrix: {name} labels span [{values.min()}, {values.max()}], expected [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    """
    Weighted accuracy, unweighted accuracy and weighted F1.

    Args:
        cm: Confusion matrix with at least one sample.

    Returns:
        ``(WA, UA, WF1)``: overall accuracy, mean recall over classes with
        support, and the support-weighted mean of per-class F1.
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("metrics: confusion matrix is empty")
    hits = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    has_support = support > 0

    wa = hits.sum() / total
    ua = np.mean(hits[has_support] / support[has_support])
    precision = np.divide(hits, predicted, out=np.zeros_like(hits), where=predicted > 0)
    recall = np.divide(hits, support, out=np.zeros_like(hits), where=has_support)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(hits), where=denom > 0)
    wf1 = float(np.sum(f1 * support) / total)
    return float(wa), float(ua), wf1


def cost_counter(forward_lengths: Iterable[int]) -> int:
    """Attention-pair count: sum of squared forward lengths."""
    return int(sum(int(length) ** 2 for length in forward_lengths))


def format_percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


def measure_latency(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = func(*args, **kwargs)
        latency = time.perf_counter() - start
        return result, latency
    return wrapper
