"""Classification and grounding metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

THRESHOLDS = np.arange(101) / 100.0


def auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney); tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _f1_acc(pred: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, float(np.mean(pred == labels))


def threshold_candidates(scores) -> np.ndarray:
    """Below-min, midpoints between sorted unique scores, above-max (ascending)."""
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def f1_acc_at_best_threshold(scores, labels) -> tuple[float, float, float]:
    """F1-maximizing threshold (lowest on ties) and the accuracy there.

    A score is predicted positive when it exceeds the threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise ValueError("no scores")
    best = (-1.0, 0.0, 0.0)
    for t in threshold_candidates(scores):
        f1, acc = _f1_acc(scores > t, labels)
        if f1 > best[0]:
            best = (f1, acc, float(t))
    return best


def normalize_heatmap(heatmap) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(heatmap, dtype=float)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def pointing_game(heatmap, mask) -> bool:
    """Hit when the first maximal pixel (row-major) lies inside the mask."""
    heatmap = np.asarray(heatmap)
    mask = np.asarray(mask).astype(bool)
    if heatmap.shape != mask.shape:
        raise ValueError(f"heatmap {heatmap.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        raise ValueError("pointing game needs a non-empty mask")
    return bool(mask.reshape(-1)[int(np.argmax(heatmap))])


def pointing_accuracy(heatmaps, masks) -> float:
    hits = [pointing_game(h, m) for h, m in zip(heatmaps, masks)]
    return float(np.mean(hits)) if hits else float("nan")


def overlap(pred, mask) -> tuple[float, float]:
    """Dice and IoU of two binary maps; both empty counts as perfect agreement."""
    pred = np.asarray(pred, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    inter = int(np.sum(pred & mask))
    total = int(pred.sum() + mask.sum())
    union = int(np.sum(pred | mask))
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def dice_iou_curve(heatmap, mask) -> np.ndarray:
    """(101, 2) array of (Dice, IoU) at thresholds 0.00, 0.01, ..., 1.00 (pixel >= t)."""
    heatmap = np.asarray(heatmap, dtype=float)
    return np.array([overlap(heatmap >= t, mask) for t in THRESHOLDS])


def dice_iou_best_threshold(heatmap, mask) -> tuple[float, float, float]:
    curve = dice_iou_curve(heatmap, mask)
    k = int(np.argmax(curve[:, 0]))
    return float(curve[k, 0]), float(curve[k, 1]), float(THRESHOLDS[k])


def detection_pr(heatmaps, masks, iou_threshold: float = 0.1,
                 predicted=None) -> tuple[float, float]:
    """Instance-level detection precision and recall.

    Each heatmap is binarized at its own Dice-best threshold.  An instance is
    predicted positive when that binarization is non-empty (and, if
    ``predicted`` flags are given, its flag is set); it is a true positive when
    its mask is non-empty and IoU reaches ``iou_threshold``.  Precision of an
    empty prediction set is 0.
    """
    tp = n_pred = n_true = 0
    for i, (h, m) in enumerate(zip(heatmaps, masks)):
        m = np.asarray(m, dtype=bool)
        _, iou, t = dice_iou_best_threshold(h, m)
        is_pred = bool((np.asarray(h) >= t).any())
        if predicted is not None and not predicted[i]:
            is_pred = False
        has_true = bool(m.any())
        n_pred += is_pred
        n_true += has_true
        tp += is_pred and has_true and iou >= iou_threshold
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    return precision, recall
