"""Evaluation metrics: cell-averaged accuracy, bias amplification, weighted mAP,
F-score thresholds, dataset skew and the linear domain probe."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import average_precision_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

log = logging.getLogger(__name__)


def _ints(*arrays):
    out = [np.asarray(a, dtype=np.int64).ravel() for a in arrays]
    if len({len(a) for a in out}) > 1:
        raise ValueError("prediction and label arrays differ in length")
    return out


def cell_accuracies(pred, y, d, n_classes=None, n_domains=None):
    """(N, D) accuracy per (class, domain) cell; NaN where the cell is empty."""
    pred, y, d = _ints(pred, y, d)
    n_c = n_classes or int(y.max()) + 1
    n_d = n_domains or int(d.max()) + 1
    cell = y * n_d + d
    size = np.bincount(cell, minlength=n_c * n_d).astype(float)
    hits = np.bincount(cell, weights=(pred == y).astype(float), minlength=n_c * n_d)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (hits / size).reshape(n_c, n_d)


def mean_class_domain_accuracy(pred, y, d, n_classes=None, n_domains=None):
    """Accuracy averaged uniformly over every (class, domain) cell."""
    acc = cell_accuracies(pred, y, d, n_classes, n_domains)
    if np.isnan(acc).any():
        empty = [tuple(map(int, c)) for c in np.argwhere(np.isnan(acc))]
        raise ValueError(f"empty (class, domain) cells in the test set: {empty}")
    return float(acc.mean())


def domain_accuracies(pred, y, d, n_classes=None, n_domains=None):
    """Per-domain mean per-class accuracy (the per-test-copy columns)."""
    acc = cell_accuracies(pred, y, d, n_classes, n_domains)
    if np.isnan(acc).any():
        raise ValueError("empty (class, domain) cells in the test set")
    return acc.mean(axis=0)


def bias_amplification(pred, d, n_classes=None):
    """Mean over classes of max(Gr_c, Col_c) / (Gr_c + Col_c) - 0.5.

    Counts are predictions of class c split by the example's true domain.
    A class that is never predicted contributes 0 and is logged.
    """
    pred, d = _ints(pred, d)
    if len(d) and d.max() > 1:
        raise ValueError("bias amplification is defined for two domains")
    n_c = n_classes or int(pred.max()) + 1
    counts = np.zeros((n_c, 2))
    np.add.at(counts, (pred, d), 1.0)
    total = counts.sum(axis=1)
    never = np.flatnonzero(total == 0)
    if len(never):
        log.warning("classes never predicted (contribute 0 to bias amplification): %s", never.tolist())
    terms = np.zeros(n_c)
    ok = total > 0
    terms[ok] = counts[ok].max(axis=1) / total[ok] - 0.5
    return float(terms.mean())


def group_counts(labels, group):
    """(A, 2) count of positives per attribute in each group."""
    labels = np.asarray(labels).astype(bool)
    if labels.ndim == 1:
        labels = labels[:, None]
    g = np.asarray(group, dtype=np.int64)
    return np.stack([labels[g == 0].sum(axis=0), labels[g == 1].sum(axis=0)], axis=1).astype(float)


def bias_amplification_attr(predictions, labels, group, train_counts=None):
    """Multi-label bias amplification per attribute and its mean.

    For each attribute the majority group m is the one with more training
    positives; the term is ``P_m / (P_0 + P_1) - N_m / (N_0 + N_1)`` with P
    counting predicted positives per group.  ``train_counts`` (A, 2) defaults
    to the positives of ``labels``.  An attribute with no predicted positives
    scores ``-N_m / (N_0 + N_1)``.
    """
    pred_counts = group_counts(predictions, group)
    n = group_counts(labels, group) if train_counts is None else np.asarray(train_counts, dtype=float)
    if n.shape != pred_counts.shape:
        raise ValueError("train_counts must be (n_attributes, 2)")
    maj = np.argmax(n, axis=1)
    rows = np.arange(len(n))
    n_tot = n.sum(axis=1)
    if np.any(n_tot == 0):
        raise ValueError("attribute without training positives has no skew direction")
    base = n[rows, maj] / n_tot
    p_tot = pred_counts.sum(axis=1)
    frac = np.zeros(len(n))
    ok = p_tot > 0
    frac[ok] = pred_counts[rows, maj][ok] / p_tot[ok]
    if (~ok).any():
        log.info("attributes with no predicted positives: %s", np.flatnonzero(~ok).tolist())
    per = frac - base
    return per, float(per.mean())


def weighted_map(scores, labels, group, counts=None):
    """Mean over attributes of group-weighted average precision.

    Each positive of group g gets weight ``(N_0 + N_1) / (2 N_g)``, where N_g
    counts that attribute's positives in group g (``counts``, shape (A, 2),
    defaults to those in ``labels``).  Negatives keep weight 1.  Attributes
    lacking positives in either group are skipped.  Returns (mAP, per-attribute
    APs with NaN for skipped ones).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    g = np.asarray(group, dtype=np.int64)
    counts = group_counts(labels, g) if counts is None else np.asarray(counts, dtype=float)
    aps = np.full(scores.shape[1], np.nan)
    skipped = []
    for a in range(scores.shape[1]):
        n0, n1 = counts[a]
        if n0 == 0 or n1 == 0:
            skipped.append(a)
            continue
        w_pos = np.where(g == 0, (n0 + n1) / (2 * n0), (n0 + n1) / (2 * n1))
        w = np.where(labels[:, a], w_pos, 1.0)
        aps[a] = average_precision_score(labels[:, a], scores[:, a], sample_weight=w)
    if skipped:
        log.warning("attributes skipped in weighted mAP (no positives in a group): %s", skipped)
    if np.isnan(aps).all():
        raise ValueError("no attribute has positives in both groups")
    return float(np.nanmean(aps)), aps


def f1_at(scores, labels, threshold):
    """F1 of the rule ``score >= threshold``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos = scores >= threshold
    tp = np.sum(pos & labels)
    denom = pos.sum() + labels.sum()
    return 2.0 * tp / denom if denom else 0.0


def best_f_threshold(scores, labels):
    """Threshold maximizing F1 for ``score >= t``; returns (threshold, f1).

    Candidates are the lowest score (everything positive) and the midpoints
    between consecutive unique scores.  Ties go to the lower threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative label")
    u = np.unique(scores)
    cands = np.concatenate([u[:1], (u[:-1] + u[1:]) / 2])
    # candidate k flags every score >= u[k]: a prefix of the descending order
    tp_cum = np.cumsum(labels[np.argsort(-scores, kind="stable")])
    n_pos_pred = len(scores) - np.searchsorted(np.sort(scores), u, side="left")
    tp = tp_cum[n_pos_pred - 1]
    f1 = 2.0 * tp / (n_pos_pred + labels.sum())
    k = int(np.argmax(f1))
    return float(cands[k]), float(f1[k])


def dataset_skew(labels, group, n_classes=None):
    """Majority-group fraction among each class's (or attribute's) positives.

    ``labels`` is a class vector or an (n, A) binary attribute table.
    Entries with no positives are NaN, logged and excluded from the mean.
    Returns (per-entry skew, mean).
    """
    labels = np.asarray(labels)
    g = np.asarray(group, dtype=np.int64)
    if labels.ndim == 1:
        n_c = n_classes or int(labels.max()) + 1
        table = np.zeros((n_c, int(g.max()) + 1 if len(g) else 2))
        np.add.at(table, (labels.astype(np.int64), g), 1.0)
    else:
        table = group_counts(labels, g)
    tot = table.sum(axis=1)
    per = np.full(len(table), np.nan)
    ok = tot > 0
    per[ok] = table[ok].max(axis=1) / tot[ok]
    if (~ok).any():
        log.warning("entries without positives skipped in skew: %s", np.flatnonzero(~ok).tolist())
    if not ok.any():
        raise ValueError("no entry has positives")
    return per, float(np.nanmean(per))


def domain_probe(features, d, seed=0, train_frac=0.5, C=1.0):
    """Held-out accuracy of a logistic-regression domain classifier on frozen features."""
    x = np.asarray(features, dtype=float)
    d = np.asarray(d, dtype=np.int64)
    if len(np.unique(d)) < 2:
        raise ValueError("domain probe needs examples from at least two domains")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(d))
    cut = int(round(train_frac * len(d)))
    tr, te = idx[:cut], idx[cut:]
    if len(np.unique(d[tr])) < 2 or len(te) == 0:
        raise ValueError("probe split left a single domain in training or no held-out examples")
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000))
    clf.fit(x[tr], d[tr])
    return float(clf.score(x[te], d[te]))


def mean_two_sigma(values):
    """Mean and 2 sample standard deviations (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    spread = 2.0 * v.std(ddof=1) if v.size > 1 else 0.0
    return float(v.mean()), float(spread)


@dataclass
class MetricReport:
    """Per-seed metric values keyed by metric name."""
    values: dict = field(default_factory=dict)

    def add(self, name, value):
        self.values.setdefault(name, []).append(float(value))

    def summary(self):
        return {k: mean_two_sigma(v) + (len(v),) for k, v in self.values.items()}
