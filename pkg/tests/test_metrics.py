import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rdseg.metrics import (
    CaseMetrics,
    ConfusionCounts,
    aggregate,
    compute_metrics,
    confusion_counts,
    report,
    summary_table,
)


def brute_force(pred, gt):
    """Per-pixel loop; returns (dsc, sensitivity, specificity) with None where undefined."""
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    dsc = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return (tp, fp, tn, fn), (dsc, sens, spec)


def test_worked_example():
    m = compute_metrics(ConfusionCounts(tp=2, fp=1, tn=12, fn=1))
    assert (round(m.dsc, 4), round(m.sensitivity, 4), round(m.specificity, 4)) == (0.6667, 0.6667, 0.9231)


def test_confusion_small():
    pred = np.array([[1, 1, 0], [0, 1, 0]], bool)
    gt = np.array([[1, 0, 0], [1, 1, 0]], bool)
    assert confusion_counts(pred, gt) == ConfusionCounts(tp=2, fp=1, tn=2, fn=1)


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (8, 9)), arrays(bool, (8, 9)))
def test_matches_brute_force(pred, gt):
    c = confusion_counts(pred, gt)
    counts, expected = brute_force(pred, gt)
    assert (c.tp, c.fp, c.tn, c.fn) == counts
    m = compute_metrics(c)
    assert (m.dsc, m.sensitivity, m.specificity) == expected


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_dsc_symmetric_and_bounded(pred, gt):
    a = compute_metrics(confusion_counts(pred, gt)).dsc
    b = compute_metrics(confusion_counts(gt, pred)).dsc
    assert a == b and 0 <= a <= 1


def test_edge_cases():
    empty = np.zeros((4, 4), bool)
    m = compute_metrics(confusion_counts(empty, empty))
    assert m.dsc == 1.0 and m.sensitivity is None and m.specificity == 1.0
    full = np.ones((4, 4), bool)
    m = compute_metrics(confusion_counts(full, full))
    assert m.specificity is None and m.sensitivity == 1.0


def test_rejects_bad_masks():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion_counts(np.full((2, 2), 2), np.zeros((2, 2)))


def test_aggregate_population_std():
    cases = [CaseMetrics(0.6, 0.5, None), CaseMetrics(0.8, 1.0, 0.9)]
    agg = aggregate(cases)
    assert agg["dsc"].mean == pytest.approx(0.7) and agg["dsc"].std == pytest.approx(0.1)
    assert agg["specificity"].count == 1 and agg["specificity"].excluded == 1
    assert agg["dsc"].format() == "0.700±0.100"


def test_aggregate_all_undefined():
    agg = aggregate([CaseMetrics(1.0, None, 1.0)])
    assert not agg["sensitivity"].available and agg["sensitivity"].format() == "n/a"


def test_report_and_table():
    c = compute_metrics(ConfusionCounts(2, 1, 12, 1), "a")
    tasks = {"lung": [c, c], "infection": [c]}
    doc = json.loads(json.dumps(report(tasks)))
    assert doc["lung"]["aggregate"]["dsc"]["count"] == 2
    assert doc["infection"]["cases"][0]["id"] == "a"
    lines = summary_table(tasks).splitlines()
    assert lines[0] == "Task\tDSC\tSensitivity\tSpecificity"
    assert lines[1] == "Lung\t0.667±0.000\t0.667±0.000\t0.923±0.000"
