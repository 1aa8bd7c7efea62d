"""Produce the input-dependent set of outputs and their probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import ndcore as nd
from .etf import etf_probabilities
from .networks import DmmModel, encode_input, generate

DEFAULT_EPSILON = 1e-5


@dataclass
class Prediction:
    items: List[Tuple[np.ndarray, float]]  # (mask estimate [H, W], probability), descending
    code_indices: List[int]
    all_probabilities: np.ndarray  # over every code, before filtering

    @property
    def n_x(self) -> int:
        return len(self.items)

    @property
    def probabilities(self) -> List[float]:
        return [p for _, p in self.items]

    @property
    def masks(self) -> List[np.ndarray]:
        return [m for m, _ in self.items]


def select_codes(probs: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> List[int]:
    """Indices with probability >= epsilon, by descending probability then index."""
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.flatnonzero(probs >= epsilon)
    order = np.lexsort((keep, -probs[keep]))
    return [int(i) for i in keep[order]]


def predict_batch(xs, model: DmmModel, epsilon: float = DEFAULT_EPSILON,
                  renormalize: bool = False) -> List[Prediction]:
    n = model.dims.N
    if not 0.0 < epsilon < 1.0 / n:
        raise ValueError(f"epsilon must lie in (0, 1/N) = (0, {1.0 / n}), got {epsilon}")
    xs = np.asarray(xs, dtype=model.dtype)
    if xs.ndim == 2:
        xs = xs[None]
    h_, w_ = model.dims.H, model.dims.W
    with nd.no_tape():
        latent, h = encode_input(xs, model)
        probs = etf_probabilities(h.data, model.classifier)
        out = []
        for b in range(len(xs)):
            sel = select_codes(probs[b], epsilon)
            codes = model.codebook.codes.data[:, sel].T
            lat = nd.Tensor(np.repeat(latent.data[b:b + 1], len(sel), axis=0))
            masks = generate(lat, codes, model).data.reshape(len(sel), h_, w_)
            p = probs[b, sel]
            if renormalize:
                p = p / p.sum()
            out.append(Prediction([(masks[j], float(p[j])) for j in range(len(sel))], sel, probs[b]))
    return out


def predict(x, model: DmmModel, epsilon: float = DEFAULT_EPSILON,
            renormalize: bool = False) -> Prediction:
    """Algorithm-2 inference for a single ``[H, W]`` input."""
    x = np.asarray(x)
    if x.shape != (model.dims.H, model.dims.W):
        raise nd.DimensionError(f"input shape {x.shape} != {(model.dims.H, model.dims.W)}")
    return predict_batch(x[None], model, epsilon, renormalize)[0]


def binarize(mask_estimate, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(mask_estimate) >= threshold).astype(np.uint8)
