"""Dense-prediction evaluation metrics (plain numpy, no autodiff)."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

MAXF_THRESHOLDS = np.linspace(0.0, 1.0, 257)[1:-1]  # 255 thresholds
ODS_THRESHOLDS = np.linspace(0.01, 0.99, 99)
ODS_TOLERANCE = 0.0075


def _valid(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} vs map {tuple(shape)}")
    return mask


def confusion_matrix(pred, gt, num_classes: int, mask=None) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = _valid(gt.shape, mask)
    p, g = pred[valid], gt[valid]
    if p.size and (p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError(f"class index outside 0..{num_classes - 1}")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes that occur in the ground truth (rows of ``conf``)."""
    inter = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    union = gt_count + conf.sum(axis=0) - inter
    present = gt_count > 0
    if not present.any():
        raise ValueError("mIoU: ground truth has no valid pixels")
    return float(np.mean(inter[present] / union[present]))


def metric_miou(pred, gt, num_classes: int, mask=None) -> float:
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes, mask))


def metric_rmse(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = _valid(gt.shape[:2], mask)
    diff = (pred - gt)[valid]
    return float(np.sqrt(np.mean(diff * diff)))


def angular_errors(pred, gt, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between H x W x 3 normal fields."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"normals must be matching H x W x 3 arrays, got {pred.shape}, {gt.shape}")
    valid = _valid(gt.shape[:2], mask)

    def unit(v):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.maximum(n, 1e-12)

    dot = np.clip((unit(pred) * unit(gt)).sum(axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))[valid]


def metric_merr(pred, gt, mask=None) -> float:
    return float(np.mean(angular_errors(pred, gt, mask)))


def _f1(precision, recall):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denom = precision + recall
    return np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)


def metric_maxf(scores, gt, mask=None, thresholds=MAXF_THRESHOLDS) -> float:
    """Max F1 over thresholds of ``scores >= t`` against a binary map."""
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if scores.shape != gt.shape:
        raise ValueError(f"scores {scores.shape} vs ground truth {gt.shape}")
    valid = _valid(gt.shape, mask)
    s, g = scores[valid], gt[valid]
    n_pos = g.sum()
    if n_pos == 0:
        return 0.0
    pred = s[None, :] >= np.asarray(thresholds)[:, None]
    tp = (pred & g[None, :]).sum(axis=1)
    n_pred = pred.sum(axis=1)
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 0.0)
    recall = tp / n_pos
    return float(_f1(precision, recall).max())


def boundary_match_counts(pred: np.ndarray, gt: np.ndarray, tolerance: float):
    """Counts for tolerance-based boundary matching of two binary maps.

    A predicted pixel is correct when some ground-truth boundary pixel lies
    within ``tolerance`` (Euclidean); a ground-truth pixel is recalled when
    some predicted pixel lies within ``tolerance``.

    Returns (matched_pred, n_pred, matched_gt, n_gt).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    matched_pred = matched_gt = 0
    if n_pred and n_gt:
        dist_to_gt = distance_transform_edt(~gt)
        dist_to_pred = distance_transform_edt(~pred)
        matched_pred = int((dist_to_gt[pred] <= tolerance).sum())
        matched_gt = int((dist_to_pred[gt] <= tolerance).sum())
    return matched_pred, n_pred, matched_gt, n_gt


def metric_odsf(
    scores: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    thresholds=ODS_THRESHOLDS,
    tolerance_frac: float = ODS_TOLERANCE,
) -> float:
    """F1 at the best single dataset-wide threshold for edge score maps."""
    if len(scores) != len(gts) or not len(scores):
        raise ValueError("odsF needs equally many (nonzero) score and ground-truth maps")
    gts = [np.asarray(g).astype(bool) for g in gts]
    if sum(int(g.sum()) for g in gts) == 0:
        raise ValueError("odsF: no ground-truth boundary pixels in the dataset")
    totals = np.zeros((len(thresholds), 4), dtype=np.int64)
    for s, g in zip(scores, gts):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != g.shape:
            raise ValueError(f"scores {s.shape} vs ground truth {g.shape}")
        tol = tolerance_frac * float(np.hypot(*g.shape))
        for i, t in enumerate(thresholds):
            totals[i] += boundary_match_counts(s >= t, g, tol)
    matched_pred, n_pred, matched_gt, n_gt = totals.T
    precision = np.where(n_pred > 0, matched_pred / np.maximum(n_pred, 1), 0.0)
    recall = matched_gt / n_gt
    return float(_f1(precision, recall).max())
