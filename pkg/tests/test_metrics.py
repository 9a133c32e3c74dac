"""Metric formulas against brute-force pixel loops and concordance counting."""

import csv

import numpy as np
import pytest

from uniseg.data import Domain, Sample
from uniseg.metrics import (
    ConfusionCounts,
    confusion,
    dice,
    evaluate,
    iou,
    precision_recall_f1,
    roc_auc,
    write_report_csv,
)


def brute_confusion(pred, truth):
    tp = fp = tn = fn = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


def test_confusion_trivial_cases():
    ones = np.ones((2, 2), dtype=np.uint8)
    c = confusion(ones, ones)
    assert (c.tp, c.fp, c.tn, c.fn) == (4, 0, 0, 0)
    c = confusion(np.ones((3, 3), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))
    assert (c.tp, c.fp, c.tn, c.fn) == (0, 9, 0, 0)
    assert c.total == 9


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        truth = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        c = confusion(pred, truth)
        assert (c.tp, c.fp, c.tn, c.fn) == brute_confusion(pred, truth)


def test_confusion_errors():
    with pytest.raises(ValueError, match="mismatch"):
        confusion(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="binary"):
        confusion(np.full((2, 2), 0.5), np.zeros((2, 2)))


def test_dice_iou_hand_cases():
    truth = np.zeros((4, 4), dtype=np.uint8)
    truth.ravel()[:8] = 1
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred.ravel()[:4] = 1  # |pred|=4, |truth|=8, overlap 4
    assert dice(pred, truth) == pytest.approx(8.0 / 12.0)
    assert iou(pred, truth) == pytest.approx(4.0 / 8.0)

    same = (np.arange(16).reshape(4, 4) < 5).astype(np.uint8)
    assert dice(same, same) == 1.0
    assert iou(same, same) == 1.0
    c = confusion(same, same)
    assert precision_recall_f1(c) == (1.0, 1.0, 1.0)

    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[3, 3] = 1
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0
    p, r, f1 = precision_recall_f1(confusion(a, b))
    assert (p, r, f1) == (0.0, 0.0, 0.0)


def test_degenerate_conventions():
    empty = np.zeros((3, 3), dtype=np.uint8)
    full = np.ones((3, 3), dtype=np.uint8)
    assert dice(empty, empty) == 1.0
    assert iou(empty, empty) == 1.0
    assert precision_recall_f1(confusion(empty, empty)) == (1.0, 1.0, 1.0)
    assert dice(empty, full) == 0.0
    assert iou(empty, full) == 0.0


def test_dice_iou_identity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pred = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        truth = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        d = dice(pred, truth)
        j = iou(pred, truth)
        assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12


def test_f1_equals_dice_on_pixel_level():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pred = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        truth = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        _, _, f1 = precision_recall_f1(confusion(pred, truth))
        assert abs(f1 - dice(pred, truth)) < 1e-12


def test_roc_auc_trivial_and_hand_cases():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    assert roc_auc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]) == pytest.approx(0.75)


def test_roc_auc_matches_concordance_counting():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = (rng.random(n) < 0.5).astype(np.uint8)
        if labels.min() == labels.max():
            continue
        assert abs(roc_auc(scores, labels) - brute_auc(scores, labels)) < 1e-12


def test_roc_auc_monotone_invariance():
    rng = np.random.default_rng(4)
    scores = rng.random(64)
    labels = (rng.random(64) < 0.4).astype(np.uint8)
    base = roc_auc(scores, labels)
    for transform in (lambda s: 3.0 * s + 1.0, np.exp, lambda s: s**3):
        assert abs(roc_auc(transform(scores), labels) - base) < 1e-12


def test_roc_auc_single_class_errors():
    with pytest.raises(ValueError, match="single class"):
        roc_auc([0.1, 0.9], [1, 1])


class ExactModel:
    """Predicts each sample's own mask (looked up by stored id)."""

    def __init__(self, samples):
        self.lookup = {s.image.tobytes(): s.mask for s in samples}

    def predict(self, image):
        mask = self.lookup[image.tobytes()].astype(np.float64)
        return mask * 0.98 + 0.01  # confident but not saturated


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict(self, image):
        return np.full((1,) + image.shape[1:], self.value)


def make_samples(rng, n_per_domain=2, size=16):
    samples = []
    for domain in Domain:
        for i in range(n_per_domain):
            mask = np.zeros((1, size, size), dtype=np.uint8)
            y, x = rng.integers(2, size - 6, 2)
            mask[0, y : y + 4, x : x + 4] = 1
            image = rng.random((4, size, size))
            image[0] += 2.0 * mask[0]
            samples.append(Sample(image=image, mask=mask, domain=domain, id=f"{domain.tag}{i}"))
    return samples


def test_evaluate_exact_model_scores_one():
    rng = np.random.default_rng(5)
    samples = make_samples(rng)
    report = evaluate(ExactModel(samples), samples)
    for domain in Domain:
        assert report.per_domain[domain]["dice"] == 1.0
        assert report.per_domain[domain]["auc"] == 1.0
    assert report.macro["dice"] == 1.0
    assert report.pooled_counts.fp == 0 and report.pooled_counts.fn == 0


def test_evaluate_constant_half_has_zero_recall():
    rng = np.random.default_rng(6)
    samples = make_samples(rng)
    report = evaluate(ConstantModel(0.5), samples)  # 0.5 maps to negative
    for domain in Domain:
        assert report.per_domain[domain]["recall"] == 0.0


def test_evaluate_matches_hand_computation():
    rng = np.random.default_rng(7)
    samples = make_samples(rng, n_per_domain=2, size=16)
    model = ExactModel(samples)
    # corrupt one MRI prediction by shifting its mask lookup
    bad = samples[0]
    shifted = np.roll(bad.mask, 2, axis=2)
    model.lookup[bad.image.tobytes()] = shifted
    report = evaluate(model, samples)

    counts = ConfusionCounts()
    for s in samples[:2]:
        pred = (model.predict(s.image) > 0.5).astype(np.uint8)
        counts = counts + confusion(pred, s.mask)
    expect_dice = 2 * counts.tp / (2 * counts.tp + counts.fp + counts.fn)
    assert abs(report.per_domain[Domain.MRI_LIKE]["dice"] - expect_dice) < 1e-9
    p, r, f1 = precision_recall_f1(counts)
    assert abs(report.per_domain[Domain.MRI_LIKE]["precision"] - p) < 1e-9
    assert abs(report.per_domain[Domain.MRI_LIKE]["recall"] - r) < 1e-9
    for key in ("dice", "iou", "precision", "recall", "f1", "auc"):
        macro = (report.per_domain[Domain.MRI_LIKE][key] + report.per_domain[Domain.CT_LIKE][key]) / 2
        assert abs(report.macro[key] - macro) < 1e-15
        for domain in Domain:
            assert 0.0 <= report.per_domain[domain][key] <= 1.0


def test_evaluate_empty_domain_flagged():
    rng = np.random.default_rng(8)
    samples = [s for s in make_samples(rng) if s.domain is Domain.MRI_LIKE]
    report = evaluate(ExactModel(samples), samples)
    assert report.skipped_domains == [Domain.CT_LIKE]
    assert Domain.CT_LIKE not in report.per_domain


def test_report_csv_layout(tmp_path):
    rng = np.random.default_rng(9)
    samples = make_samples(rng)
    report = evaluate(ExactModel(samples), samples)
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["dataset", "dice", "iou", "precision", "recall", "f1", "auc"]
    assert [r[0] for r in rows[1:]] == ["mri", "ct", "macro"]
    assert len(rows) == 4
    assert float(rows[3][1]) == report.macro["dice"]
