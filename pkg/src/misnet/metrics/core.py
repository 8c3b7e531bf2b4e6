"""Vectorised segmentation metrics: Dice/IoU, weighted F-measure, S-measure, E-measure, MAE.

All functions take a probability map ``pred`` in [0, 1] and a binary mask
``gt`` of the same shape.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate
from scipy.spatial import cKDTree

from ..core import as_binary_mask, as_prob_map

EPS = np.spacing(1.0)
# 255 cut points k/256; contains 0.5 so max-mode >= fixed-mode
E_THRESHOLDS = np.arange(1, 256) / 256.0


def _pair(pred, gt):
    pred, gt = as_prob_map(pred), as_binary_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    return pred, gt


def binarize_threshold(pred, threshold=0.5, mode="fixed"):
    if mode == "adaptive":
        return min(2.0 * float(np.mean(pred)), 1.0)
    if mode != "fixed":
        raise ValueError(f"unknown threshold mode {mode!r}")
    return threshold


def dice_iou(pred, gt, threshold=0.5, mode="fixed"):
    pred, gt = _pair(pred, gt)
    s = pred >= binarize_threshold(pred, threshold, mode)
    inter = np.count_nonzero(s & gt)
    total = np.count_nonzero(s) + np.count_nonzero(gt)
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / (total - inter)


def mae(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(gt - pred)))


# -- weighted F-measure ------------------------------------------------------

def gaussian_kernel(size=7, sigma=5.0):
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < EPS * k.max()] = 0
    return k / k.sum()


def nearest_foreground(gt):
    """Distance to, and flat index of, the nearest foreground pixel for every pixel.

    Ties are broken towards the smallest row-major index. Foreground pixels
    map to themselves at distance 0.
    """
    h, w = gt.shape
    fg = np.flatnonzero(gt)
    dist = np.zeros(gt.size)
    index = np.arange(gt.size)
    bg = np.flatnonzero(~gt)
    if bg.size and fg.size:
        fg_pts = np.column_stack(np.divmod(fg, w)).astype(float)
        bg_pts = np.column_stack(np.divmod(bg, w)).astype(float)
        tree = cKDTree(fg_pts)
        d, _ = tree.query(bg_pts)
        # lattice distances differ by far more than 1e-6 at any practical size
        hits = tree.query_ball_point(bg_pts, r=d + 1e-6)
        dist[bg] = d
        index[bg] = fg[[min(hit) for hit in hits]]
    return dist.reshape(h, w), index.reshape(h, w)


def weighted_fmeasure(pred, gt, beta2=1.0):
    """Weighted F-measure; 0.0 when ``gt`` has no foreground (recall undefined)."""
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return 0.0
    g = gt.astype(float)
    err = np.abs(pred - g)
    dist, idx = nearest_foreground(gt)
    err_t = err.ravel()[idx]
    err_a = correlate(err_t, gaussian_kernel(7, 5.0), mode="constant", cval=0.0)
    min_e = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tp = g.sum() - ew[gt].sum()
    fp = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp / (tp + fp + EPS)
    return float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


# -- S-measure ---------------------------------------------------------------

def _object_score(x, mask):
    vals = x[mask]
    mu = vals.mean()
    sd = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + EPS)


def object_similarity(pred, gt):
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _object_score(fg, gt) + (1.0 - u) * _object_score(bg, ~gt)


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def centroid(gt):
    """1-based (x, y) split point: the rounded foreground centroid, or the image centre."""
    h, w = gt.shape
    if not gt.any():
        return _round_half_up(w / 2), _round_half_up(h / 2)
    rows, cols = np.nonzero(gt)
    return _round_half_up(cols.mean() + 1), _round_half_up(rows.mean() + 1)


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def region_similarity(pred, gt):
    h, w = gt.shape
    x, y = centroid(gt)
    g = gt.astype(float)
    area = h * w
    blocks = (
        (slice(0, y), slice(0, x), x * y),
        (slice(0, y), slice(x, w), (w - x) * y),
        (slice(y, h), slice(0, x), x * (h - y)),
        (slice(y, h), slice(x, w), (w - x) * (h - y)),
    )
    score = 0.0
    for rs, cs, n in blocks:
        if n:  # empty quadrants carry zero weight
            score += n / area * _ssim(pred[rs, cs], g[rs, cs])
    return score


def s_measure(pred, gt, alpha=0.5):
    pred, gt = _pair(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * object_similarity(pred, gt) + (1.0 - alpha) * region_similarity(pred, gt)
    return float(min(max(score, 0.0), 1.0))


# -- E-measure ---------------------------------------------------------------

def _enhanced(f, g, mu_f, mu_g):
    af, ag = f - mu_f, g - mu_g
    align = 2.0 * af * ag / (af * af + ag * ag + EPS)
    return (align + 1.0) ** 2 / 4.0


def _e_from_counts(n_ff, n_fb, n_bf, n_bb, n_gt, n):
    """Mean enhanced alignment of a binary map given its joint counts with ``gt``.

    ``n_ff`` = pred 1 & gt 1, ``n_fb`` = pred 1 & gt 0, ``n_bf`` = pred 0 & gt 1, ``n_bb`` = both 0.
    """
    if n_gt == 0:
        return (n_bf + n_bb) / n
    if n_gt == n:
        return (n_ff + n_fb) / n
    mu_f = (n_ff + n_fb) / n
    mu_g = n_gt / n
    total = (n_ff * _enhanced(1.0, 1.0, mu_f, mu_g) + n_fb * _enhanced(1.0, 0.0, mu_f, mu_g)
             + n_bf * _enhanced(0.0, 1.0, mu_f, mu_g) + n_bb * _enhanced(0.0, 0.0, mu_f, mu_g))
    return total / n


def e_measure(pred, gt, mode="max", threshold=0.5):
    """Enhanced-alignment measure; ``mode="max"`` takes the best of 255 thresholds."""
    pred, gt = _pair(pred, gt)
    n = gt.size
    n_gt = int(np.count_nonzero(gt))
    if mode == "fixed":
        thresholds = np.array([threshold])
    elif mode == "max":
        thresholds = E_THRESHOLDS
    else:
        raise ValueError(f"unknown E-measure mode {mode!r}")
    fg_sorted = np.sort(pred[gt])
    bg_sorted = np.sort(pred[~gt])
    # number of pixels with pred >= t
    n_ff = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    n_fb = bg_sorted.size - np.searchsorted(bg_sorted, thresholds, side="left")
    scores = [_e_from_counts(a, b, n_gt - a, (n - n_gt) - b, n_gt, n) for a, b in zip(n_ff, n_fb)]
    return float(max(scores))


METRIC_NAMES = ("mdice", "miou", "wfm", "sm", "em", "mae")


def all_metrics(pred, gt, threshold=0.5, threshold_mode="fixed", e_mode="max") -> dict:
    dice, iou = dice_iou(pred, gt, threshold, threshold_mode)
    return {
        "mdice": dice,
        "miou": iou,
        "wfm": weighted_fmeasure(pred, gt),
        "sm": s_measure(pred, gt),
        "em": e_measure(pred, gt, mode=e_mode, threshold=threshold),
        "mae": mae(pred, gt),
    }
