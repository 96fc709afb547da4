"""Task-adaptive correctness rewards and the weighted total reward."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .interface import FormatVerdict
from .metrics import hungarian_max, s_measure
from .raster import BinaryMask, GrayMask, as_pixels, check_same_shape, iou, union, zeros_like

__all__ = [
    "LAMBDA",
    "IASM_TAU",
    "RewardBreakdown",
    "InstanceSet",
    "correctness_sod",
    "correctness_cosod",
    "iasm",
    "iasm_pairs",
    "total_reward",
]

LAMBDA = 0.5
IASM_TAU = 0.1


@dataclass(frozen=True)
class RewardBreakdown:
    r_corr: float
    r_fmt: float
    r_total: float
    lam: float = LAMBDA

    def as_record(self) -> dict[str, float]:
        return {"r_corr": self.r_corr, "r_fmt": self.r_fmt, "lambda": self.lam, "r": self.r_total}


@dataclass(frozen=True)
class InstanceSet:
    masks: tuple[BinaryMask, ...]
    shape: tuple[int, int]

    def __init__(self, masks, shape=None):
        masks = tuple(masks)
        if shape is None:
            if not masks:
                raise ValueError("an empty InstanceSet needs an explicit shape")
            shape = masks[0].shape
        if masks:
            check_same_shape(np.zeros(shape), *masks)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "shape", tuple(shape))

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


def correctness_sod(per_expression_masks: list[BinaryMask], gt: GrayMask) -> float:
    """S-measure of the union of all region masks against the ground truth."""
    if not per_expression_masks:
        raise ValueError("correctness_sod needs at least one mask")
    return s_measure(union(per_expression_masks), gt)


def correctness_cosod(per_image_masks: list[BinaryMask], gts: list[GrayMask]) -> float:
    """Mean S-measure across the image group."""
    if len(per_image_masks) != len(gts):
        raise ValueError(f"{len(per_image_masks)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("correctness_cosod needs a non-empty group")
    return math.fsum(s_measure(m, g) for m, g in zip(per_image_masks, gts)) / len(gts)


def iasm_pairs(pred: InstanceSet, gt: InstanceSet, tau: float = IASM_TAU):
    """Aligned (pred, gt) mask pairs after matching; unmatched sides get zero masks."""
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError(f"instance sets differ in shape: {pred.shape} vs {gt.shape}")
    if not len(pred) and not len(gt):
        raise ValueError("IASM is undefined when both instance sets are empty")
    zero = zeros_like(np.zeros(gt.shape))
    # Matching runs on a content-sorted order so that ties between equally
    # good assignments never depend on how the caller listed the instances.
    preds = _canonical(pred.masks)
    gts = _canonical(gt.masks)
    kept: list[tuple[int, int]] = []
    if preds and gts:
        overlaps = np.array([[iou(g, m) for m in preds] for g in gts])
        # Filtering by tau happens after the global optimum is found.
        kept = [(i, j) for i, j in hungarian_max(overlaps).pairs if overlaps[i, j] >= tau]
    matched_gt = {i for i, _ in kept}
    matched_pred = {j for _, j in kept}
    pairs = [(preds[j], gts[i]) for i, j in kept]
    pairs += [(zero, g) for i, g in enumerate(gts) if i not in matched_gt]
    pairs += [(m, zero) for j, m in enumerate(preds) if j not in matched_pred]
    return pairs


def _canonical(masks) -> list[BinaryMask]:
    return sorted(masks, key=lambda m: np.packbits(as_pixels(m) > 0.5).tobytes())


def iasm(pred: InstanceSet, gt: InstanceSet, tau: float = IASM_TAU) -> float:
    """Instance-aligned S-measure over the L = I + M - |matches| aligned pairs."""
    pairs = iasm_pairs(pred, gt, tau)
    return math.fsum(s_measure(m, g) for m, g in pairs) / len(pairs)


def total_reward(r_corr: float, verdict: FormatVerdict, lam: float = LAMBDA) -> RewardBreakdown:
    if not 0.0 <= r_corr <= 1.0:
        raise ValueError(f"r_corr must lie in [0, 1], got {r_corr}")
    r_fmt = verdict.r_struct + verdict.r_tag
    return RewardBreakdown(r_corr=r_corr, r_fmt=r_fmt, r_total=lam * r_corr + (1 - lam) * r_fmt, lam=lam)
