import numpy as np
import pytest

from egospeak.metrics import FoldMetrics, MetricsReport, compute_metrics
from egospeak.rng import make_rng


def naive_counts(preds, labels):
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1 and y == 0:
            fp += 1
        elif p == 0 and y == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def naive_macro_f1(tp, fp, tn, fn):
    def f1(t, f_pos, f_neg):
        return 0.0 if 2 * t + f_pos + f_neg == 0 else 2 * t / (2 * t + f_pos + f_neg)

    return (f1(tp, fp, fn) + f1(tn, fn, fp)) / 2


def test_oracle_on_random_vectors():
    rng = make_rng(0, "metrics")
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        labels = rng.integers(0, 2, n)
        preds = rng.integers(0, 2, n)
        m = compute_metrics(preds, labels)
        tp, fp, tn, fn = naive_counts(preds, labels)
        assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
        assert m.total == n
        assert m.macro_f1 == naive_macro_f1(tp, fp, tn, fn)
        assert m.acc == (tp + tn) / n
        P, N = tp + fn, tn + fp
        if P and N:
            assert abs(m.acc - (m.recall * P + m.specificity * N) / (P + N)) < 1e-9


def test_hand_example():
    m = compute_metrics([1, 1, 0, 0], [1, 0, 0, 1])
    assert (m.tp, m.fp, m.tn, m.fn) == (1, 1, 1, 1)
    assert m.acc == m.recall == m.specificity == m.macro_f1 == 0.5


def test_perfect_and_degenerate():
    m = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert m.as_dict() == {"acc": 1.0, "macro_f1": 1.0, "recall": 1.0, "specificity": 1.0}
    m = compute_metrics([0, 0, 0, 0], [1, 1, 0, 0])
    assert (m.recall, m.specificity, m.acc) == (0.0, 1.0, 0.5)


def test_absent_class_warns():
    m = compute_metrics([0, 1], [0, 0])
    assert m.f1_child == 0.0 and m.warnings


def test_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0])
    with pytest.raises(ValueError):
        compute_metrics([2], [0])


def test_report_mean_is_plain_mean():
    folds = [FoldMetrics(3, 1, 4, 2), FoldMetrics(5, 0, 2, 1), FoldMetrics(1, 1, 1, 1)]
    mean = MetricsReport(folds).mean()
    for k in mean:
        assert mean[k] == np.mean([getattr(f, k) for f in folds])
    with pytest.raises(ValueError):
        MetricsReport().mean()
