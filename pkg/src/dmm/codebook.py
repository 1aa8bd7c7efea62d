"""Discrete codebook: initialization, nearest-code lookup, covariance
regularization and exponential-moving-average updates.

Codes are stored column-wise in an ``m x N`` tensor so that the covariance
loss can push gradient into them. Indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import ndcore as nd
from .ndcore import DimensionError, Tensor


class ConfigurationError(ValueError):
    pass


class DegenerateCodeError(ZeroDivisionError):
    pass


@dataclass
class Codebook:
    codes: Tensor  # m x N, column j is code j
    ema_counts: np.ndarray  # N
    ema_accum: np.ndarray  # m x N
    tau: float
    kappa: float

    @property
    def dim(self) -> int:
        return self.codes.shape[0]

    @property
    def size(self) -> int:
        return self.codes.shape[1]

    def code(self, index: int) -> np.ndarray:
        return self.codes.data[:, index]


def default_tau(m: int) -> float:
    return 1.0 / (2.0 * math.sqrt(m))


def init_codebook(N: int, m: int, kappa: float = 0.99, seed: int = 0) -> Codebook:
    """Random orthonormal codes with threshold ``1/(2 sqrt(m))``.

    Requires ``N < 2m``. For ``N <= m`` the codes are mutually orthogonal; the
    ``N - m`` extra codes of an over-complete book are random unit vectors.
    """
    if N < 1 or m < 1:
        raise ConfigurationError(f"codebook needs N >= 1 and m >= 1, got N={N}, m={m}")
    if N >= 2 * m:
        raise ConfigurationError(f"codebook size N={N} must be < 2m={2 * m}")
    if not 0.0 < kappa < 1.0:
        raise ConfigurationError(f"EMA decay must lie in (0, 1), got {kappa}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    q = q * np.sign(np.diag(r))
    cols = [q[:, : min(N, m)]]
    if N > m:
        extra = rng.standard_normal((m, N - m))
        cols.append(extra / np.linalg.norm(extra, axis=0))
    codes = np.concatenate(cols, axis=1).astype(np.float32)
    return Codebook(
        codes=Tensor(codes, requires_grad=True, name="codebook"),
        ema_counts=np.ones(N, dtype=np.float32),
        ema_accum=codes.copy(),
        tau=default_tau(m),
        kappa=float(kappa),
    )


def squared_distances(features: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """``[B, N]`` matrix of squared distances, computed without expansion."""
    diff = features[:, None, :].astype(np.float64) - codes.T[None, :, :].astype(np.float64)
    return (diff * diff).sum(axis=-1)


def nearest_codes(features: np.ndarray, cb: Codebook) -> np.ndarray:
    """Batched argmin over codes; ties go to the lowest index."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != cb.dim:
        raise DimensionError(f"features of shape {features.shape} do not match code dim {cb.dim}")
    return np.argmin(squared_distances(features, cb.codes.data), axis=1)


def nearest_code(feature, cb: Codebook) -> tuple[int, np.ndarray]:
    feature = np.asarray(feature).reshape(1, -1)
    idx = int(nearest_codes(feature, cb)[0])
    return idx, cb.code(idx).copy()


def covariance_loss(cb: Codebook | Tensor, tau: float | None = None) -> Tensor:
    """Mean square of normalized pairwise inner products exceeding ``tau``.

    Entries with magnitude at most ``tau`` are dropped; the loss is 0 when
    nothing survives.
    """
    codes = cb.codes if isinstance(cb, Codebook) else cb
    if tau is None:
        tau = cb.tau if isinstance(cb, Codebook) else default_tau(codes.shape[0])
    try:
        unit = nd.normalize_columns(codes)
    except ZeroDivisionError:
        raise DegenerateCodeError("covariance loss undefined for a zero-norm code") from None
    n = codes.shape[1]
    gram = nd.sub(nd.matmul(nd.transpose(unit), unit), np.eye(n, dtype=codes.data.dtype))
    keep = np.abs(gram.data) > tau
    count = int(keep.sum())
    if count == 0:
        return nd.mul(nd.sum(gram), 0.0)
    masked = nd.mul(nd.square(gram), keep.astype(codes.data.dtype))
    return nd.mul(nd.sum(masked), 1.0 / count)


def ema_update(cb: Codebook, indices: Sequence[int], features: np.ndarray) -> None:
    """Exponential-moving-average update of counts, accumulators and codes.

    The accumulators are first re-synchronised with the current codes so any
    gradient step taken on the codes since the last update is retained.
    Codes receiving no assignment keep their exact value.
    """
    features = np.asarray(features, dtype=np.float64).reshape(len(indices), -1)
    if features.size and features.shape[1] != cb.dim:
        raise DimensionError(f"features of dim {features.shape[1]} do not match code dim {cb.dim}")
    idx = np.asarray(indices, dtype=np.int64)
    k = cb.kappa
    codes = cb.codes.data.astype(np.float64)
    n_prev = cb.ema_counts.astype(np.float64)
    counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
    sums = np.zeros((cb.dim, cb.size))
    np.add.at(sums.T, idx, features)

    n_new = n_prev * k + counts * (1.0 - k)
    acc_new = codes * n_prev * k + sums * (1.0 - k)
    used = counts > 0
    new_codes = cb.codes.data.copy()
    new_codes[:, used] = (acc_new[:, used] / n_new[used]).astype(np.float32)

    cb.ema_counts = n_new.astype(np.float32)
    cb.ema_accum = acc_new.astype(np.float32)
    cb.codes.data = new_codes


def usage_stats(indices: Iterable[int], cb: Codebook) -> tuple[int, float]:
    """Active-code count and mean |cosine| over distinct active pairs."""
    active = np.unique(np.fromiter(indices, dtype=np.int64))
    if active.size < 2:
        return int(active.size), 0.0
    sub = cb.codes.data[:, active].astype(np.float64)
    norms = np.linalg.norm(sub, axis=0)
    if np.any(norms == 0):
        raise DegenerateCodeError("zero-norm active code")
    unit = sub / norms
    gram = np.abs(unit.T @ unit)
    iu = np.triu_indices(active.size, k=1)
    return int(active.size), float(gram[iu].mean())
