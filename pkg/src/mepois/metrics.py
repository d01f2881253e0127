"""Evaluation metrics. Undefined values (single-class AUROC, no positives, empty F1) are ``nan``."""

from __future__ import annotations

import math

import numpy as np

UNDEFINED = math.nan


def is_undefined(v: float) -> bool:
    return isinstance(v, float) and math.isnan(v)


def nanmean(values) -> float:
    """Macro average over defined entries; ``nan`` if none are defined."""
    vals = [v for v in values if not is_undefined(float(v))]
    return float(np.mean(vals)) if vals else UNDEFINED


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + ½·P(tie), via midranks (Mann–Whitney U)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    r = _midranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: Σ_k (R_k − R_{k−1})·P_k over distinct score thresholds, descending."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        return UNDEFINED
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # final index of each tied score group
    tp_k = tp[last]
    precision = tp_k / (last + 1)
    recall = tp_k / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def f1_binary(y_true, y_pred) -> float:
    t = np.asarray(y_true).astype(bool).ravel()
    p = np.asarray(y_pred).astype(bool).ravel()
    tp = int((t & p).sum())
    fp = int((~t & p).sum())
    fn = int((t & ~p).sum())
    if tp + fp + fn == 0:
        return UNDEFINED
    return 2 * tp / (2 * tp + fp + fn)


def f1_macro_multilabel(y_true, y_pred) -> float:
    """Mean per-column F1 over ``[n, k]`` indicator arrays; columns with no positives on either side are skipped."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return nanmean(f1_binary(t[:, j], p[:, j]) for j in range(t.shape[1]))


def f1_macro(y_true, y_pred, n_classes: int | None = None) -> float:
    """Macro F1 over classes (one-vs-rest); classes absent from both truth and prediction are skipped."""
    t = np.asarray(y_true).ravel()
    p = np.asarray(y_pred).ravel()
    k = n_classes if n_classes is not None else int(max(t.max(initial=0), p.max(initial=0))) + 1
    return nanmean(f1_binary(t == c, p == c) for c in range(k))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true).ravel(), np.asarray(y_pred).ravel()), 1)
    return m


def accuracy(y_true, y_pred) -> float:
    t = np.asarray(y_true).ravel()
    return float(np.mean(t == np.asarray(y_pred).ravel())) if len(t) else UNDEFINED


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))))


def mean_cosine(pred, target, eps: float = 1e-8) -> float:
    a = np.atleast_2d(np.asarray(pred, dtype=float))
    b = np.atleast_2d(np.asarray(target, dtype=float))
    num = (a * b).sum(1)
    den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), eps)
    return float(np.mean(num / den))


def auroc_macro(scores, labels) -> float:
    s, y = np.asarray(scores), np.asarray(labels)
    return nanmean(auroc(s[:, j], y[:, j]) for j in range(y.shape[1]))


def auprc_macro_ovr(probs, labels, n_classes: int) -> float:
    p, y = np.asarray(probs), np.asarray(labels).ravel()
    return nanmean(auprc(p[:, c], y == c) for c in range(n_classes))
