"""Score a model against a multi-label dataset: GED squared with uniform label
weights, and per-mode matched probabilities and IoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .infer import DEFAULT_EPSILON, Prediction, binarize, predict_batch
from .metrics import (WeightedMaskSet, ged_squared, match_modes, mode_stats,
                      pairwise_distance)
from .networks import DmmModel
from .synthdata import DmmDataset


@dataclass
class EntryResult:
    entry: int
    n_x: int
    ged: float
    matched: np.ndarray  # summed probability per ground-truth mode
    ious: List[float]  # IoU of each prediction with its matched mode


@dataclass
class Summary:
    n: int
    ged_mean: float
    ged_std: float
    mode_mean: np.ndarray
    mode_std: np.ndarray
    mean_iou: float
    n_x_counts: dict

    def line(self) -> str:
        modes = " ".join(f"mode{j}={m:.4f}+-{s:.4f}"
                         for j, (m, s) in enumerate(zip(self.mode_mean, self.mode_std)))
        return (f"entries={self.n} ged2={self.ged_mean:.4f}+-{self.ged_std:.4f} "
                f"iou={self.mean_iou:.4f} {modes}")


def score_entry(entry: int, pred: Prediction, labels: Sequence[np.ndarray]) -> EntryResult:
    masks = [binarize(m) for m in pred.masks]
    probs = np.asarray(pred.probabilities, dtype=np.float64)
    # the filtered probabilities are renormalized so the prediction is a weighted set
    preds = WeightedMaskSet(masks, list(probs / probs.sum()))
    ged = ged_squared(WeightedMaskSet.uniform(list(labels)), preds)
    idx = match_modes(masks, list(labels))
    score = 1.0 - pairwise_distance(masks, list(labels))
    matched = np.zeros(len(labels))
    for i, (j, p) in enumerate(zip(idx, probs)):
        matched[j] += p
    ious = [float(score[i, j]) for i, j in enumerate(idx)]
    return EntryResult(entry, pred.n_x, ged, matched, ious)


def evaluate(model: DmmModel, dataset: DmmDataset, epsilon: float = DEFAULT_EPSILON,
             batch: int = 64) -> List[EntryResult]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if tuple(dataset.dims) != (model.dims.H, model.dims.W):
        raise ValueError(f"dataset dims {tuple(dataset.dims)} do not match model dims "
                         f"{(model.dims.H, model.dims.W)}")
    out = []
    for start in range(0, len(dataset), batch):
        xs = np.stack(dataset.inputs[start:start + batch])
        for k, pred in enumerate(predict_batch(xs, model, epsilon)):
            i = start + k
            out.append(score_entry(i, pred, dataset.labels[i]))
    return out


def summarize(results: Sequence[EntryResult]) -> Summary:
    geds = np.array([r.ged for r in results])
    stats = mode_stats([r.matched for r in results])
    ious = [v for r in results for v in r.ious]
    counts: dict = {}
    for r in results:
        counts[r.n_x] = counts.get(r.n_x, 0) + 1
    return Summary(len(results), float(geds.mean()), float(geds.std()), stats.mean,
                   stats.std, float(np.mean(ious)) if ious else 0.0, dict(sorted(counts.items())))


def write_results(path, results: Sequence[EntryResult]) -> None:
    n_modes = max(len(r.matched) for r in results)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["entry", "n_x", "ged2", "mean_iou"] + [f"p_mode{j}" for j in range(n_modes)])
        for r in results:
            probs = list(r.matched) + [""] * (n_modes - len(r.matched))
            w.writerow([r.entry, r.n_x, f"{r.ged:.6f}",
                        f"{np.mean(r.ious):.6f}" if r.ious else ""]
                       + [p if p == "" else f"{p:.6f}" for p in probs])
