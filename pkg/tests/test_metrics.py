import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gliopipe import autodiff as ad
from gliopipe.metrics import (
    CSV_COLUMNS,
    ConfusionMatrix,
    MetricsRecord,
    classification_metrics,
    cross_entropy,
    dice,
    focal_loss,
    iou,
    jaccard_loss,
    macro_dice,
    macro_iou,
    mean_iou,
    one_hot,
    read_metrics_csv,
    records_to_csv,
    records_to_jsonl,
    total_loss,
)
from gliopipe.volcore import LabelMask

from conftest import grad_check


# --- focal ----------------------------------------------------------------------

def test_focal_scalar_examples():
    assert focal_loss(np.array([1.0]), np.array([1.0])).item() == pytest.approx(0.0, abs=1e-12)
    assert focal_loss(np.array([0.9]), np.array([1.0])).item() == pytest.approx(-0.25 * 0.01 * math.log(0.9), rel=1e-9)
    assert focal_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-9)
    assert focal_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(0.04332, abs=1e-5)


def test_focal_negative_term():
    # y = 0: -(1 - alpha) p^g log(1 - p)
    v = focal_loss(np.array([0.3]), np.array([0.0]), alpha=0.25, gamma=2).item()
    assert v == pytest.approx(-0.75 * 0.09 * math.log(0.7), rel=1e-12)


def test_focal_nonnegative_and_monotone():
    ps = np.linspace(0.01, 0.99, 50)
    vals = [focal_loss(np.array([p]), np.array([1.0])).item() for p in ps]
    assert min(vals) >= 0
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_focal_shape_mismatch():
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 3)), np.zeros((3, 2)))


# --- Jaccard ------------------------------------------------------------------------

def _two_class(fg):
    fg = np.asarray(fg, float)
    return np.stack([1 - fg, fg])[None]      # [1, 2, ...]


def test_jaccard_examples():
    a = np.zeros(10)
    a[:4] = 1
    assert jaccard_loss(_two_class(a), _two_class(a)).item() == pytest.approx(0.0, abs=1e-9)
    b = np.zeros(10)
    b[5:9] = 1
    assert jaccard_loss(_two_class(a), _two_class(b)).item() == pytest.approx(1.0, abs=1e-6)
    c = np.zeros(10)
    c[2:6] = 1
    assert jaccard_loss(_two_class(a), _two_class(c)).item() == pytest.approx(2 / 3, abs=1e-6)


def test_jaccard_averages_foreground_classes(rng):
    lab_p = rng.integers(0, 3, (1, 6, 6))
    lab_t = rng.integers(0, 3, (1, 6, 6))
    p, t = one_hot(lab_p, 3), one_hot(lab_t, 3)
    per = [jaccard_loss(p, t, classes=[c]).item() for c in (1, 2)]
    assert jaccard_loss(p, t).item() == pytest.approx(np.mean(per), rel=1e-12)
    for c, v in zip((1, 2), per):
        assert v == pytest.approx(1 - iou(lab_p, lab_t, c), abs=1e-6)


def test_total_loss_is_sum_and_grad(rng):
    logits = ad.parameter(rng.standard_normal((2, 3, 2, 2, 2)))
    y = one_hot(rng.integers(0, 3, (2, 2, 2, 2)), 3)
    p = ad.softmax(logits, axis=1)
    assert total_loss(p, y).item() == focal_loss(p, y).item() + jaccard_loss(p, y).item()
    assert grad_check(lambda: total_loss(ad.softmax(logits, axis=1), y), [logits]) < 1e-4


def test_total_loss_perfect():
    y = one_hot(np.array([[0, 1, 2, 1]]), 3)
    assert total_loss(y, y).item() < 1e-5


def test_cross_entropy(rng):
    logits = ad.parameter(rng.standard_normal((4, 2)))
    y = np.eye(2)[[0, 1, 1, 0]]
    want = -np.mean(np.sum(y * (logits.values - np.log(np.exp(logits.values).sum(1, keepdims=True))), 1))
    assert cross_entropy(logits, y).item() == pytest.approx(want, rel=1e-12)
    assert grad_check(lambda: cross_entropy(logits, y), [logits]) < 1e-4


def test_one_hot():
    oh = one_hot(np.array([[2, 0]]), 3)
    assert oh.shape == (1, 3, 2)
    np.testing.assert_array_equal(oh[0, :, 0], [0, 0, 1])


# --- overlap metrics -------------------------------------------------------------------

def test_dice_iou_examples():
    a = np.zeros((1, 1, 10), int)
    b = np.zeros((1, 1, 10), int)
    a[..., :4] = 1
    b[..., 2:6] = 1
    assert dice(a, b, 1) == 0.5
    assert iou(a, b, 1) == pytest.approx(1 / 3)
    assert dice(a, a, 1) == 1 and iou(a, a, 1) == 1
    c = np.zeros_like(a)
    c[..., 7:] = 1
    assert dice(a, c, 1) == 0 and iou(a, c, 1) == 0
    assert dice(a, b, 3) == 1.0 and iou(a, b, 3) == 1.0   # empty vs empty
    with pytest.raises(ValueError):
        dice(a, np.zeros((1, 1, 9), int), 1)


def test_mean_iou_examples():
    a = np.zeros((1, 1, 4), int)
    a[..., :2] = 1
    b = np.zeros_like(a)
    b[..., 2:] = 1
    assert mean_iou([(a, a), (a, b)], n_classes=2) == 0.5
    assert mean_iou([(a, a)], n_classes=2) == 1.0
    with pytest.raises(ValueError):
        mean_iou([])


def test_label_mask_inputs():
    m = LabelMask(np.ones((2, 2, 2), int))
    assert macro_dice(m, m) == 1.0 and macro_iou(m, m) == 1.0


def brute_counts(p, t, c):
    inter = union = np_ = nt = 0
    for a, b in zip(p.ravel(), t.ravel()):
        inter += (a == c) and (b == c)
        union += (a == c) or (b == c)
        np_ += a == c
        nt += b == c
    return inter, union, np_, nt


def test_overlap_oracle_random_masks(rng):
    for _ in range(100):
        p = rng.integers(0, 5, (8, 8, 8))
        t = rng.integers(0, 5, (8, 8, 8))
        for c in range(5):
            inter, union, n_p, n_t = brute_counts(p, t, c)
            assert dice(p, t, c) == (2 * inter / (n_p + n_t) if n_p + n_t else 1.0)
            assert iou(p, t, c) == (inter / union if union else 1.0)
            assert iou(p, t, c) <= dice(p, t, c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_iou_le_dice_property(seed, density):
    r = np.random.default_rng(seed)
    p = (r.random((4, 4, 4)) < density).astype(int)
    t = (r.random((4, 4, 4)) < density).astype(int)
    d, j = dice(p, t, 1), iou(p, t, 1)
    assert j <= d + 1e-15
    if np.array_equal(p, t):
        assert d == j == 1.0


# --- classification ---------------------------------------------------------------------

def test_classification_examples():
    m = classification_metrics(ConfusionMatrix.from_counts(tp=58, tn=16, fp=0, fn=0))
    assert (m["accuracy"], m["precision"], m["recall"], m["f1"]) == (1, 1, 1, 1)
    m = classification_metrics(ConfusionMatrix.from_counts(tp=0, tn=3, fp=1, fn=2))
    assert m["recall"] == 0 and "f1" in m["undefined"]
    m = classification_metrics(ConfusionMatrix.from_counts(tp=8, tn=8, fp=2, fn=2))
    for k in ("accuracy", "precision", "recall", "f1"):
        assert m[k] == pytest.approx(0.8, abs=1e-15)
    m = classification_metrics(ConfusionMatrix.from_counts(tp=0, tn=3, fp=0, fn=2))
    assert m["precision"] == 0 and "precision" in m["undefined"]


def test_confusion_oracle_random(rng):
    for _ in range(100):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 20, 4))
        if tp + tn + fp + fn == 0:
            continue
        actual = ["HGG"] * (tp + fn) + ["LGG"] * (tn + fp)
        predicted = ["HGG"] * tp + ["LGG"] * fn + ["LGG"] * tn + ["HGG"] * fp
        cm = ConfusionMatrix.from_labels(actual, predicted)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (tp, tn, fp, fn)
        m = classification_metrics(cm)
        assert m["accuracy"] == (tp + tn) / (tp + tn + fp + fn)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        assert m["precision"] == prec and m["recall"] == rec
        assert m["f1"] == (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


def test_confusion_layout_and_errors():
    cm = ConfusionMatrix.from_labels([-1, -1, 1, 1, 1], [-1, 1, 1, 1, -1])
    assert cm.counts == ((1, 1), (1, 2))
    assert cm.to_csv() == "actual\\predicted,LGG,HGG\nLGG,1,1\nHGG,1,2\n"
    assert [sum(r) for r in cm.counts] == [2, 3]
    with pytest.raises(ValueError):
        classification_metrics(ConfusionMatrix([[0, 0], [0, 0]]))
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 0]])


# --- records ------------------------------------------------------------------------

def test_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord(1, "test", 0.1)
    with pytest.raises(ValueError):
        MetricsRecord(1, "val", 0.1, dice=1.2)


def test_csv_roundtrip():
    recs = [MetricsRecord(1, "train", 0.5, dice=0.25, lr=0.1), MetricsRecord(1, "val", 0.75, iou=1 / 3)]
    text = records_to_csv(recs)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    rows = read_metrics_csv(text)
    assert rows[0]["dice"] == 0.25 and rows[0]["iou"] is None
    assert rows[1]["iou"] == 1 / 3 and rows[1]["split"] == "val"
    assert records_to_jsonl(recs).count("\n") == 2


def test_csv_missing_column_named():
    with pytest.raises(ValueError, match="'loss'"):
        read_metrics_csv("epoch,split\n1,train\n")
    with pytest.raises(ValueError, match="not numeric"):
        read_metrics_csv("epoch,split,loss\n1,train,abc\n")
