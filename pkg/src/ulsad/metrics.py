"""Image AUROC, pixel AUROC and AUPRO."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import MetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(anomalous > normal) + 0.5 P(tie), using mid-ranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in length ({s.size} vs {y.size})")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both normal and anomalous samples")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _stack(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> Tuple[list, list]:
    if len(maps) != len(masks):
        raise MetricError("number of maps and masks differ")
    out_maps, out_masks = [], []
    for m, g in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g) != 0
        if m.shape != g.shape:
            raise MetricError(f"map {m.shape} and mask {g.shape} shapes differ")
        out_maps.append(m)
        out_masks.append(g)
    return out_maps, out_masks


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    maps, masks = _stack(maps, masks)
    return auroc(np.concatenate([m.ravel() for m in maps]), np.concatenate([g.ravel() for g in masks]))


def pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact (FPR, PRO) curve over every distinct score, descending threshold.

    A pixel is predicted anomalous when score >= threshold. Regions are the
    8-connected components of each mask; PRO averages per-region recall.
    FPR is pooled over all normal pixels. The curve starts at (0, 0).
    """
    maps, masks = _stack(maps, masks)
    scores, weights_fpr, weights_pro = [], [], []
    n_regions = 0
    region_sizes = []
    region_ids = []
    for m, g in zip(maps, masks):
        lab, n = ndimage.label(g, structure=EIGHT_CONNECTED)
        scores.append(m.ravel())
        region_ids.append(np.where(lab.ravel() > 0, lab.ravel() - 1 + n_regions, -1))
        region_sizes.append(np.bincount(lab.ravel(), minlength=n + 1)[1:])
        n_regions += n
    if n_regions == 0:
        raise MetricError("AUPRO needs at least one anomalous region")
    scores = np.concatenate(scores)
    rid = np.concatenate(region_ids)
    sizes = np.concatenate(region_sizes).astype(np.float64)
    normal = rid < 0
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise MetricError("AUPRO needs normal pixels to define the false-positive rate")

    w_fpr = normal / n_normal
    w_pro = np.zeros_like(scores)
    w_pro[~normal] = 1.0 / (n_regions * sizes[rid[~normal]])

    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    fpr = np.cumsum(w_fpr[order])
    pro = np.cumsum(w_pro[order])
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fpr = np.r_[0.0, fpr[ends]]
    pro = np.r_[0.0, pro[ends]]
    return np.clip(fpr, 0.0, 1.0), np.clip(pro, 0.0, 1.0)


def integrate_capped(x: np.ndarray, y: np.ndarray, x_max: float) -> float:
    """Trapezoid area under y(x) on [0, x_max]; ``x`` must be non-decreasing."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= x_max
    xs, ys = x[keep], y[keep]
    if xs[-1] < x_max and keep.size > keep.sum():
        i = int(np.argmax(~keep))  # first point beyond the cap
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        y_cap = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0)
        xs, ys = np.r_[xs, x_max], np.r_[ys, y_cap]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under the PRO-vs-FPR curve up to ``fpr_limit``, normalised to [0, 1]."""
    if not 0 < fpr_limit <= 1:
        raise MetricError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return integrate_capped(fpr, pro, fpr_limit) / fpr_limit
