"""IoU, generalized energy distance over weighted mask sets, and per-mode
probability statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .ndcore import ContractError, DimensionError


@dataclass
class WeightedMaskSet:
    masks: List[np.ndarray]
    weights: List[float]

    def __post_init__(self):
        if len(self.masks) != len(self.weights):
            raise ContractError("masks and weights differ in length")
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ContractError(f"weights must be nonnegative and sum to 1, got sum {w.sum()}")

    @classmethod
    def uniform(cls, masks: Sequence[np.ndarray]) -> "WeightedMaskSet":
        return cls(list(masks), [1.0 / len(masks)] * len(masks))


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as identical."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pairwise_distance(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray]) -> np.ndarray:
    """Matrix of ``1 - IoU`` between every mask of ``xs`` and ``ys``."""
    if not xs or not ys:
        return np.zeros((len(xs), len(ys)))
    shape = np.asarray(xs[0]).shape
    if any(np.asarray(m).shape != shape for m in (*xs, *ys)):
        raise DimensionError("all masks must share one shape")
    a = np.stack([np.asarray(m).astype(bool).reshape(-1) for m in xs]).astype(np.float64)
    b = np.stack([np.asarray(m).astype(bool).reshape(-1) for m in ys]).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(union > 0, inter / union, 1.0)
    return 1.0 - score


def ged_squared(labels: WeightedMaskSet, preds: WeightedMaskSet) -> float:
    py = np.asarray(labels.weights, dtype=np.float64)
    ps = np.asarray(preds.weights, dtype=np.float64)
    cross = py @ pairwise_distance(labels.masks, preds.masks) @ ps
    within_y = py @ pairwise_distance(labels.masks, labels.masks) @ py
    within_s = ps @ pairwise_distance(preds.masks, preds.masks) @ ps
    return float(2.0 * cross - within_y - within_s)


def match_modes(pred_masks: Sequence[np.ndarray], mode_masks: Sequence[np.ndarray]) -> List[int]:
    """Index of the max-IoU ground-truth mode for each prediction (ties to lower index)."""
    if not pred_masks:
        return []
    score = 1.0 - pairwise_distance(pred_masks, mode_masks)
    return [int(np.argmax(row)) for row in score]


def matched_probabilities(pred_masks, probs, mode_masks) -> np.ndarray:
    """Per-mode summed probability of the predictions matched to it."""
    out = np.zeros(len(mode_masks))
    for j, p in zip(match_modes(pred_masks, mode_masks), probs):
        out[j] += p
    return out


@dataclass
class ModeStats:
    mean: np.ndarray
    std: np.ndarray
    per_entry: np.ndarray  # [entries, modes]


def mode_stats(per_entry_matched: Sequence[Sequence[float]]) -> ModeStats:
    arr = np.asarray(per_entry_matched, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("mode_stats needs a non-empty [entries, modes] table")
    return ModeStats(arr.mean(axis=0), arr.std(axis=0), arr)
