"""Saliency evaluation metrics and exact maximum-weight assignment.

All map-level metrics take a prediction map with values in [0, 1] and a
ground truth. Ground truths given as gray maps are read as binary with the
ingestion threshold (strictly above byte 128).
"""

from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .raster import (
    BINARY_INGEST_THRESHOLD,
    BinaryMask,
    MaskLike,
    as_pixels,
    check_same_shape,
    iou,
)

__all__ = [
    "EPS",
    "ALPHA",
    "BETA_SQUARED",
    "THRESHOLDS",
    "Assignment",
    "ScoredMask",
    "MetricReport",
    "s_measure",
    "e_measure",
    "e_measure_curve",
    "f_measure_max",
    "f_measure_curve",
    "mae",
    "hungarian_max",
    "average_precision",
    "evaluate_map",
]

# Machine epsilon, as in the widely used reference implementations of these metrics.
EPS = float(np.spacing(1))
ALPHA = 0.5
BETA_SQUARED = 0.3
THRESHOLDS = np.arange(256) / 255.0


def _gt_bool(gt: MaskLike) -> np.ndarray:
    return as_pixels(gt) > BINARY_INGEST_THRESHOLD


# --- S-measure ---------------------------------------------------------------


def _sample_std(x: np.ndarray) -> float:
    # A constant region has zero spread; rounding in the mean must not say otherwise.
    if x.size < 2 or x.min() == x.max():
        return 0.0
    return float(np.std(x, ddof=1))


def _object_score(x: np.ndarray) -> float:
    mean = float(x.mean())
    return 2.0 * mean / (mean * mean + 1.0 + _sample_std(x) + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    mu = float(gt.mean())
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return mu * fg + (1.0 - mu) * bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    # 1-based split indices: floor of the mean 0-based foreground coordinate, plus one.
    rows, cols = np.nonzero(gt)
    return int(math.floor(cols.mean())) + 1, int(math.floor(rows.mean())) + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x = float(pred.mean())
    y = float(gt.mean())
    const_x = pred.min() == pred.max()
    const_y = gt.min() == gt.max()
    var_x = 0.0 if n < 2 or const_x else float(((pred - x) ** 2).sum()) / (n - 1)
    var_y = 0.0 if n < 2 or const_y else float(((gt - y) ** 2).sum()) / (n - 1)
    cov = 0.0 if n < 2 or const_x or const_y else float(((pred - x) * (gt - y)).sum()) / (n - 1)
    num = 4.0 * x * y * cov
    den = (x * x + y * y) * (var_x + var_y)
    if num != 0.0:
        return num / (den + EPS)
    if den == 0.0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ):
        block = pred[rs, cs]
        if block.size == 0:
            continue
        score += block.size / (h * w) * _ssim(block, gtf[rs, cs])
    return score


def s_measure(pred: MaskLike, gt: MaskLike) -> float:
    """Structure measure: 0.5 * object-aware + 0.5 * region-aware similarity.

    An all-background ground truth scores ``1 - mean(pred)``, an all-foreground
    one ``mean(pred)``.
    """
    check_same_shape(pred, gt)
    p = as_pixels(pred)
    g = _gt_bool(gt)
    y = g.mean()
    if y == 0.0:
        return float(1.0 - p.mean())
    if y == 1.0:
        return float(p.mean())
    if np.array_equal(p, g.astype(np.float64)):
        # Both terms equal 1 up to the stabilising epsilon.
        return 1.0
    value = ALPHA * _s_object(p, g) + (1.0 - ALPHA) * _s_region(p, g)
    return float(min(1.0, max(0.0, value)))


# --- threshold sweeps ----------------------------------------------------------


def _on_counts(pred: np.ndarray) -> np.ndarray:
    """For each pixel, the number of sweep thresholds k/255 strictly below it.

    The pixel is foreground at threshold index k iff k < count.
    """
    return np.searchsorted(THRESHOLDS, pred.ravel(), side="left")


def _foreground_per_threshold(counts: np.ndarray) -> np.ndarray:
    # hist[c] pixels have count c; foreground at k means count > k.
    hist = np.bincount(counts, minlength=257)
    return hist[::-1].cumsum()[::-1][1:]


def f_measure_curve(pred: MaskLike, gt: MaskLike) -> np.ndarray:
    """F-beta (beta^2 = 0.3) at each of the 256 thresholds."""
    check_same_shape(pred, gt)
    p = as_pixels(pred)
    g = _gt_bool(gt).ravel()
    counts = _on_counts(p)
    tp = _foreground_per_threshold(counts[g]).astype(np.float64)
    fp = _foreground_per_threshold(counts[~g]).astype(np.float64)
    n_pos = float(g.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = tp / n_pos if n_pos > 0 else np.zeros_like(tp)
        den = BETA_SQUARED * precision + recall
        f = np.where(den > 0, (1 + BETA_SQUARED) * precision * recall / den, 0.0)
    return f


def f_measure_max(pred: MaskLike, gt: MaskLike) -> float:
    check_same_shape(pred, gt)
    if not _gt_bool(gt).any():
        warnings.warn("f_measure_max: ground truth is empty; precision/recall undefined, scoring 0", stacklevel=2)
        return 0.0
    return float(f_measure_curve(pred, gt).max())


def e_measure_curve(pred: MaskLike, gt: MaskLike) -> np.ndarray:
    """Enhanced-alignment score at each of the 256 thresholds."""
    check_same_shape(pred, gt)
    p = as_pixels(pred)
    g = _gt_bool(gt).ravel()
    n = g.size
    counts = _on_counts(p)
    on_fg = _foreground_per_threshold(counts[g]).astype(np.float64)
    on_bg = _foreground_per_threshold(counts[~g]).astype(np.float64)
    n_fg = float(g.sum())
    n_bg = n - n_fg
    denom = n - 1 + EPS
    if n_fg == 0:
        total = n - (on_fg + on_bg)
    elif n_bg == 0:
        total = on_fg + on_bg
    else:
        # Four (gt, bin) pixel classes share one enhanced value each.
        g_mean = n_fg / n
        b_mean = (on_fg + on_bg) / n
        total = np.zeros(256)
        for g_val, b_val, count in (
            (1.0, 1.0, on_fg),
            (1.0, 0.0, n_fg - on_fg),
            (0.0, 1.0, on_bg),
            (0.0, 0.0, n_bg - on_bg),
        ):
            dg = g_val - g_mean
            db = b_val - b_mean
            align = 2.0 * dg * db / (dg * dg + db * db + EPS)
            total += count * (align + 1.0) ** 2 / 4.0
    return np.minimum(1.0, total / denom)


def e_measure(pred: MaskLike, gt: MaskLike) -> float:
    """Max enhanced-alignment measure over the 256-threshold sweep."""
    return float(e_measure_curve(pred, gt).max())


def mae(pred: MaskLike, gt: MaskLike) -> float:
    check_same_shape(pred, gt)
    return float(np.abs(as_pixels(pred) - as_pixels(gt)).mean())


# --- assignment ----------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    pairs: list[tuple[int, int]]
    total_value: float


def hungarian_max(values) -> Assignment:
    """Maximum-total one-to-one matching of rows to columns.

    Rectangular inputs are zero-padded to square; pairs that touch padding are
    dropped, so the result has ``min(I, M)`` pairs. Shortest augmenting paths
    with potentials, O(n^3).
    """
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0 or w.shape[1] == 0:
        raise ValueError("hungarian_max needs a non-empty 2-D matrix")
    n_rows, n_cols = w.shape
    n = max(n_rows, n_cols)
    cost = np.zeros((n + 1, n + 1))
    cost[1 : n_rows + 1, 1 : n_cols + 1] = -w

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row, 1-based; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        match[0] = row
        col0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col0] = True
            r0 = match[col0]
            free = ~used
            free[0] = False
            cur = cost[r0, :] - u[r0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = col0
            cand = np.where(free, minv, np.inf)
            col1 = int(np.argmin(cand))
            delta = cand[col1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            col0 = col1
            if match[col0] == 0:
                break
        while col0:
            prev = way[col0]
            match[col0] = match[prev]
            col0 = prev

    pairs = []
    for col in range(1, n + 1):
        row = match[col]
        if row <= n_rows and col <= n_cols:
            pairs.append((int(row) - 1, col - 1))
    pairs.sort()
    total = math.fsum(w[r, c] for r, c in pairs)
    return Assignment(pairs=pairs, total_value=total)


# --- average precision -----------------------------------------------------------


@dataclass(frozen=True)
class ScoredMask:
    mask: BinaryMask
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def average_precision(preds: list[ScoredMask], gts: list[BinaryMask], iou_threshold: float) -> float:
    """All-point interpolated AP of ranked instance masks at one IoU threshold.

    Predictions are visited in descending score (stable for ties); each is a
    true positive if the still-unmatched ground truth it overlaps most reaches
    the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    if preds or gts:
        check_same_shape(*[p.mask for p in preds], *gts)
    if not preds or not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    matched = [False] * len(gts)
    hits = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            overlap = iou(preds[i].mask, gt)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            hits.append(True)
        else:
            hits.append(False)
    # Exact rational accumulation, rounded once: the precision envelope at
    # each true positive is the best precision at that rank or deeper.
    precision = []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        tp += hit
        precision.append(Fraction(tp, rank))
    area = Fraction(0)
    best = Fraction(0)
    for p, hit in zip(reversed(precision), reversed(hits)):
        best = max(best, p)
        if hit:
            area += best
    return float(area / len(gts))


# --- reports --------------------------------------------------------------------


@dataclass
class MetricReport:
    s_measure: float
    e_measure: float
    f_beta_max: float
    mae: float
    ap: dict[float, float] = field(default_factory=dict)

    def as_record(self) -> dict[str, float]:
        rec = {
            "S_m": self.s_measure,
            "E_xi": self.e_measure,
            "F_beta_max": self.f_beta_max,
            "MAE": self.mae,
        }
        for thr, value in sorted(self.ap.items()):
            rec[f"AP{round(thr * 100)}"] = value
        return rec


def evaluate_map(pred: MaskLike, gt: MaskLike) -> MetricReport:
    """The four map-level metrics for one prediction."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = f_measure_max(pred, gt)
    return MetricReport(
        s_measure=s_measure(pred, gt),
        e_measure=e_measure(pred, gt),
        f_beta_max=f,
        mae=mae(pred, gt),
    )
