"""Threshold-free detection metrics and accuracy.

Labels are binary with 1 marking the positive class (OOD or adversarial in
the experiments). AUROC gives half credit to ties; AUPR is the step-wise
area (average precision) with tied scores treated as one threshold.
"""

import numpy as np


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative")
    return scores, labels


def auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5 * P(tie), via average ranks."""
    scores, labels = _check(scores, labels)
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # twice the average rank of each tie group (1-based), kept integral
    ends = np.cumsum(counts)
    twice_rank = (2 * ends - counts + 1)[inverse]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    twice_u = int(twice_rank[labels].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def aupr(scores, labels, positive_is="ood"):
    """Area under the precision-recall step curve.

    ``positive_is="in_dist"`` flips the labels and negates the scores, which
    gives the AUPR- variant when ``labels`` mark OOD inputs.
    """
    scores, labels = _check(scores, labels)
    if positive_is == "in_dist":
        scores, labels = -scores, ~labels
    elif positive_is != "ood":
        raise ValueError(f"positive_is must be 'ood' or 'in_dist', got {positive_is!r}")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    # last index of each tie group in descending order
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[last]
    fp = (last + 1) - tp
    n_pos = int(labels.sum())
    d_tp = np.diff(np.r_[0, tp])
    return float(sum((int(d) / n_pos) * (int(a) / int(a + b)) for d, a, b in zip(d_tp, tp, fp)))


def detection_report(in_scores, out_scores):
    """AUROC, AUPR+ (OOD positive) and AUPR- (in-distribution positive)."""
    scores = np.r_[np.asarray(in_scores, float), np.asarray(out_scores, float)]
    labels = np.r_[np.zeros(len(in_scores), bool), np.ones(len(out_scores), bool)]
    return {
        "auroc": auroc(scores, labels),
        "aupr_pos": aupr(scores, labels, "ood"),
        "aupr_neg": aupr(scores, labels, "in_dist"),
    }


def accuracy(predicted, truth):
    predicted = np.asarray(predicted).ravel()
    truth = np.asarray(truth).ravel()
    if predicted.shape != truth.shape:
        raise ValueError("length mismatch")
    return float(np.mean(predicted == truth))
