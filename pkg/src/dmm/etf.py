"""Fixed simplex equiangular tight frame classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .codebook import ConfigurationError
from .ndcore import ContractError, DimensionError, Tensor


@dataclass
class EtfClassifier:
    M: Tensor  # m x N, never trainable
    seed: int

    @property
    def num_classes(self) -> int:
        return self.M.shape[1]

    @property
    def dim(self) -> int:
        return self.M.shape[0]


def etf_matrix(U: np.ndarray) -> np.ndarray:
    """``sqrt(N/(N-1)) * U @ (I - 11^T / N)`` for a column-orthonormal ``U``."""
    n = U.shape[1]
    centering = np.eye(n) - np.full((n, n), 1.0 / n)
    return math.sqrt(n / (n - 1)) * (U @ centering)


def build_etf(N: int, m: int, seed: int = 0) -> EtfClassifier:
    if N < 2:
        raise ConfigurationError(f"ETF needs at least 2 classes, got {N}")
    if m < N:
        raise ConfigurationError(f"ETF needs feature dim m >= N, got m={m}, N={N}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((m, N)))
    q = q * np.sign(np.diag(r))
    M = etf_matrix(q).astype(np.float32)
    return EtfClassifier(M=Tensor(M, name="etf"), seed=seed)


def etf_logits(h: Tensor, M: Tensor) -> Tensor:
    """Row-batched logits ``h @ M`` for ``h`` of shape [B, m]."""
    if h.data.ndim != 2 or h.shape[1] != M.shape[0]:
        raise DimensionError(f"feature shape {h.shape} incompatible with classifier {M.shape}")
    return nd.matmul(h, M)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def etf_probabilities(h, etf: EtfClassifier | Tensor) -> np.ndarray:
    """Softmax of ``M^T h``; accepts a single feature vector or a [B, m] batch."""
    M = etf.M if isinstance(etf, EtfClassifier) else etf
    arr = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(1, -1) if single else arr
    if arr.shape[1] != M.shape[0]:
        raise DimensionError(f"feature dim {arr.shape[1]} != classifier dim {M.shape[0]}")
    p = softmax(arr @ M.data.astype(np.float64))
    return p[0] if single else p


def etf_cross_entropy(h: Tensor, etf: EtfClassifier | Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(h M)[target]`` over the batch."""
    M = etf.M if isinstance(etf, EtfClassifier) else etf
    if h.data.ndim == 1:
        h = nd.reshape(h, (1, -1))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any(targets < 0) or np.any(targets >= M.shape[1]):
        raise ContractError(f"target index out of range [0, {M.shape[1]})")
    logp = nd.log_softmax(etf_logits(h, M))
    return nd.mul(nd.mean(nd.pick(logp, targets)), -1.0)
