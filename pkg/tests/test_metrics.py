import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attrnet.errors import DataError, DimensionError
from attrnet.metrics import (LabelMatrix, MetricsReport, accuracy, majority_baseline, majority_labels, nanmean,
                             sigmoid_ce, threshold)


def scalar_loss(scores, labels):
    """Per-element -(y log p + (1 - y) log(1 - p)) in 50-digit arithmetic, divided by N."""
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for s, y in zip(np.ravel(scores), np.ravel(labels)):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(float(s))))
            total += -(int(y) * mpmath.log(p) + (1 - int(y)) * mpmath.log(1 - p))
        return float(total / np.shape(scores)[0])


def test_loss_matches_scalar_loop_100_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, a = rng.integers(1, 6), rng.integers(1, 8)
        s = rng.standard_normal((n, a)) * 3
        y = rng.integers(0, 2, (n, a))
        loss, _ = sigmoid_ce(s, y)
        assert abs(loss - scalar_loss(s, y)) < 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    eps = 1e-6
    for _ in range(100):
        s = rng.standard_normal((3, 4)) * 3
        y = rng.integers(0, 2, (3, 4))
        _, g = sigmoid_ce(s, y)
        num = np.zeros_like(s)
        for idx in np.ndindex(s.shape):
            sp, sm = s.copy(), s.copy()
            sp[idx] += eps
            sm[idx] -= eps
            num[idx] = (sigmoid_ce(sp, y)[0] - sigmoid_ce(sm, y)[0]) / (2 * eps)
        assert np.max(np.abs(g - num)) < 1e-8


def test_loss_is_stable_for_large_scores():
    s = np.array([[1000.0, -1000.0, 1000.0]])
    y = np.array([[1, 0, 0]])
    loss, g = sigmoid_ce(s, y)
    assert loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(g))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.integers(0, 2**16))
def test_loss_nonnegative_and_grad_bounded(s, seed):
    y = np.random.default_rng(seed).integers(0, 2, s.shape)
    loss, g = sigmoid_ce(s, y)
    assert loss >= 0
    assert np.all(np.abs(g) <= 1.0 / s.shape[0] + 1e-15)
    # grad sign pushes scores toward the label
    assert np.all(g[y == 1] <= 0) and np.all(g[y == 0] >= 0)


def test_masked_entries_do_not_contribute():
    s = np.array([[2.0, -1.0], [0.5, 3.0]])
    y = LabelMatrix(np.array([[1, 0], [0, 1]]), np.array([[1, 0], [1, 1]]))
    loss, g = sigmoid_ce(s, y)
    assert g[0, 1] == 0
    full = scalar_loss(s, y.values) * 2 - scalar_loss(s[:1, 1:], y.values[:1, 1:])
    assert loss == pytest.approx(full / 2, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        sigmoid_ce(np.zeros((2, 3)), np.zeros((3, 2), dtype=int))


def test_label_matrix_rejects_non_binary():
    with pytest.raises(DataError):
        LabelMatrix(np.array([[0, 2]]))
    with pytest.raises(DataError):
        LabelMatrix(np.array([[0, -1]]))


def test_threshold_at_zero():
    np.testing.assert_array_equal(threshold(np.array([-0.1, 0.0, 0.1])), [0, 1, 1])


def test_accuracy_and_undefined():
    pred = np.array([[1, 0], [0, 0], [1, 1]])
    lab = LabelMatrix(np.array([[1, 1], [1, 0], [1, 0]]), np.array([[1, 0], [1, 0], [1, 0]]))
    acc = accuracy(pred, lab)
    assert acc[0] == pytest.approx(2 / 3)
    assert math.isnan(acc[1])
    assert nanmean(acc) == pytest.approx(2 / 3)
    assert math.isnan(nanmean([float("nan")]))


def test_majority_ties_to_zero_and_empty():
    lab = LabelMatrix(np.array([[1, 1, 0], [0, 1, 0]]), np.array([[1, 1, 0], [1, 1, 0]]))
    np.testing.assert_array_equal(majority_labels(lab), [0, 1, -1])


def test_majority_baseline():
    train = np.array([[1, 0], [1, 0], [0, 1]])
    test = np.array([[1, 1], [0, 1], [1, 1], [1, 0]])
    base = majority_baseline(train, test)
    np.testing.assert_allclose(base, [0.75, 0.25])


def test_report_csv_roundtrip(tmp_path):
    rep = MetricsReport(["A", "B", "C"], np.array([0.5, float("nan"), 1 / 3]), np.array([0.25, 0.5, 0.1]), 1.2345678901234567)
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    back = MetricsReport.read_csv(path)
    assert back.attributes == ["A", "B", "C"]
    np.testing.assert_array_equal(back.per_attribute_accuracy[[0, 2]], rep.per_attribute_accuracy[[0, 2]])
    assert math.isnan(back.per_attribute_accuracy[1])
    assert back.loss == rep.loss
    assert back.mean_accuracy == pytest.approx((0.5 + 1 / 3) / 2)
    assert "undefined" in path.read_text()
