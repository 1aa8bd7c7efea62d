"""Training objective: reconstruction, ETF cross-entropy, commitment and
codebook covariance terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from . import ndcore as nd
from .ndcore import DimensionError, Tensor

CLAMP = nd.SIGMOID_EPS


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def recon_loss(y_hat: Tensor, y) -> Tensor:
    """Pixel-mean binary cross-entropy against a binary target."""
    y = np.asarray(y, dtype=y_hat.data.dtype)
    if y.size != y_hat.size:
        raise DimensionError(f"prediction {y_hat.shape} and target {y.shape} differ")
    y = y.reshape(y_hat.shape)
    p = nd.clamp(y_hat, CLAMP, 1.0 - CLAMP)
    # probability assigned to the observed value: y*p + (1-y)*(1-p)
    p_obs = nd.add(nd.mul(p, 2.0 * y - 1.0), 1.0 - y)
    return nd.mul(nd.mean(nd.log(p_obs)), -1.0)


def zreg_loss(z: Tensor, code) -> Tensor:
    """Squared distance to the stop-gradient code, batch-averaged."""
    code_data = code.data if isinstance(code, Tensor) else np.asarray(code, dtype=z.data.dtype)
    if code_data.size != z.size:
        raise DimensionError(f"feature {z.shape} and code {code_data.shape} differ")
    target = Tensor(code_data.reshape(z.shape), dtype=z.data.dtype)
    sq = nd.square(nd.sub(z, target))
    if z.data.ndim == 1:
        return nd.sum(sq)
    return nd.mean(nd.sum(sq, axis=1))


Term = Union[Tensor, float]


def total_loss(terms: Mapping[str, Term], weights: LossWeights, warmup: bool = False,
               log_recon: bool = False) -> Tensor:
    """``recon + alpha*ce + beta*zreg + gamma*cov``; the CE term is dropped during warmup.

    With ``log_recon`` the reconstruction term enters as ``log(recon)``.
    """
    recon = terms["recon"]
    if log_recon:
        recon = nd.log(recon if isinstance(recon, Tensor) else Tensor(recon))
    total = nd.add(recon, 0.0)
    alpha = 0.0 if warmup else weights.alpha
    for key, w in (("ce", alpha), ("zreg", weights.beta), ("cov", weights.gamma)):
        if w != 0.0:
            total = nd.add(total, nd.mul(terms[key], w))
    return total
