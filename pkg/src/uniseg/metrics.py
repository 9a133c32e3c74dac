"""Pixel-wise segmentation metrics and ROC analysis.

Confusion counts, Dice, IoU, precision/recall/F1 and rank-based ROC-AUC,
reported per domain and macro-averaged. Degenerate cases follow the
conventions documented on each function (empty-vs-empty counts as a
perfect prediction; an empty prediction against a non-empty truth scores
zero).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Domain, Sample

METRIC_COLUMNS = ("dice", "iou", "precision", "recall", "f1", "auc")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass
class MetricsReport:
    per_domain: dict[Domain, dict[str, float]]
    macro: dict[str, float]
    pooled_auc: float
    counts: dict[Domain, ConfusionCounts]
    pooled_counts: ConfusionCounts
    threshold: float
    skipped_domains: list[Domain] = field(default_factory=list)


def _check_binary(arr: np.ndarray, name: str):
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Exact pixel-wise confusion counts for two binary masks."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    _check_binary(pred, "pred")
    _check_binary(truth, "truth")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|p n g| / (|p| + |g|); both masks empty counts as 1."""
    c = confusion(pred, truth)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """|p n g| / |p u g|; both masks empty counts as 1."""
    c = confusion(pred, truth)
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and F1 from counts. With no positives anywhere
    (tp = fp = fn = 0) all three are 1; otherwise an empty side scores 0."""
    if counts.tp == 0 and counts.fp == 0 and counts.fn == 0:
        return 1.0, 1.0, 1.0
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    )
    return precision, recall, f1


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) statistic
    with midrank tie correction; equals the probability that a random
    positive outscores a random negative, ties counted half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    _check_binary(y, "labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _metrics_from_counts(counts: ConfusionCounts) -> dict[str, float]:
    p, r, f1 = precision_recall_f1(counts)
    dice_v = 1.0 if 2 * counts.tp + counts.fp + counts.fn == 0 else (
        2.0 * counts.tp / (2 * counts.tp + counts.fp + counts.fn)
    )
    iou_v = 1.0 if counts.tp + counts.fp + counts.fn == 0 else (
        counts.tp / (counts.tp + counts.fp + counts.fn)
    )
    return {"dice": dice_v, "iou": iou_v, "precision": p, "recall": r, "f1": f1}


def evaluate(
    model,
    dataset: list[Sample],
    threshold: float = 0.5,
    auc_subsample: int = 16,
    seed: int = 0,
) -> MetricsReport:
    """Score a model over a mixed-domain dataset.

    Counting metrics binarize at ``threshold`` (strictly greater maps to
    positive). AUC uses raw probabilities on pixels subsampled uniformly
    at rate 1/``auc_subsample`` with a fixed seed; if the subsample turns
    out single-class for a domain, that domain's full pixel set is used
    instead, and if still single-class the AUC is NaN. Empty domains are
    skipped with a flag in the report.
    """
    rng = np.random.default_rng(seed)
    by_domain: dict[Domain, list[Sample]] = {d: [] for d in Domain}
    for s in dataset:
        by_domain[s.domain].append(s)

    per_domain: dict[Domain, dict[str, float]] = {}
    counts: dict[Domain, ConfusionCounts] = {}
    skipped = []
    all_scores, all_labels = [], []
    sub_scores: dict[Domain, list] = {d: [] for d in Domain}
    sub_labels: dict[Domain, list] = {d: [] for d in Domain}
    full_scores: dict[Domain, list] = {d: [] for d in Domain}
    full_labels: dict[Domain, list] = {d: [] for d in Domain}

    for domain in Domain:
        samples = by_domain[domain]
        if not samples:
            skipped.append(domain)
            continue
        dc = ConfusionCounts()
        for s in samples:
            prob = model.predict(s.image)
            pred = (prob > threshold).astype(np.uint8)
            dc = dc + confusion(pred, s.mask)
            flat_p = prob.ravel()
            flat_g = s.mask.ravel()
            take = max(1, flat_p.size // auc_subsample)
            idx = rng.permutation(flat_p.size)[:take]
            sub_scores[domain].append(flat_p[idx])
            sub_labels[domain].append(flat_g[idx])
            full_scores[domain].append(flat_p)
            full_labels[domain].append(flat_g)
        counts[domain] = dc
        per_domain[domain] = _metrics_from_counts(dc)

    for domain in per_domain:
        scores = np.concatenate(sub_scores[domain])
        labels = np.concatenate(sub_labels[domain])
        if labels.min() == labels.max():  # degenerate subsample: fall back
            scores = np.concatenate(full_scores[domain])
            labels = np.concatenate(full_labels[domain])
        try:
            per_domain[domain]["auc"] = roc_auc(scores, labels)
        except ValueError:
            per_domain[domain]["auc"] = float("nan")
        all_scores.append(scores)
        all_labels.append(labels)

    if not per_domain:
        raise ValueError("dataset is empty")

    macro = {
        k: float(np.mean([per_domain[d][k] for d in per_domain])) for k in METRIC_COLUMNS
    }
    pooled_counts = ConfusionCounts()
    for c in counts.values():
        pooled_counts = pooled_counts + c
    try:
        pooled_auc = roc_auc(np.concatenate(all_scores), np.concatenate(all_labels))
    except ValueError:
        pooled_auc = float("nan")
    return MetricsReport(
        per_domain=per_domain,
        macro=macro,
        pooled_auc=pooled_auc,
        counts=counts,
        pooled_counts=pooled_counts,
        threshold=threshold,
        skipped_domains=skipped,
    )


def write_report_csv(report: MetricsReport, path):
    """One row per domain plus a macro row, in Dice, IoU, Precision, Recall,
    F1, AUC column order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", *METRIC_COLUMNS])
        for domain, values in report.per_domain.items():
            writer.writerow([domain.tag, *[repr(float(values[k])) for k in METRIC_COLUMNS]])
        writer.writerow(["macro", *[repr(float(report.macro[k])) for k in METRIC_COLUMNS]])
