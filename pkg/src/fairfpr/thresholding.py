"""Per-batch unified threshold from the pool of non-target logits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .numerics import kth_largest


@dataclass(frozen=True)
class ThresholdEstimate:
    t_u: float
    k: int
    pool_size: int
    gamma_u: float
    realized_fpr: float


def ceil_rate_count(gamma, n):
    """``ceil(gamma * n)`` evaluated on the decimal value of ``gamma``.

    ``0.1 * 30`` is ``3.0000000000000004`` in binary floating point, which a
    plain ``math.ceil`` would round up to 4.
    """
    return math.ceil(Fraction(repr(float(gamma))) * n)


def floor_rate_count(gamma, n):
    return math.floor(Fraction(repr(float(gamma))) * n)


def nontarget_pool(cosines, labels):
    cos = np.asarray(cosines, dtype=np.float64)
    keep = np.ones(cos.shape, dtype=bool)
    keep[np.arange(cos.shape[0]), np.asarray(labels)] = False
    return cos[keep]


def threshold_from_pool(pool, gamma_u):
    if not 0.0 < gamma_u < 1.0:
        raise ValueError(f"gamma_u must be in (0, 1), got {gamma_u}")
    pool = np.asarray(pool, dtype=np.float64).ravel()
    n = pool.size
    if n == 0:
        raise ValueError("empty non-target pool")
    k = min(max(ceil_rate_count(gamma_u, n), 1), n)
    t = kth_largest(pool, k)
    realized = float(np.count_nonzero(pool > t)) / n
    return ThresholdEstimate(t, k, n, float(gamma_u), realized)


def estimate_threshold(batch, gamma_u):
    """k-th largest non-target cosine of the batch, with k = ceil(gamma_u * n_b * (c - 1)).

    ``k`` is clamped to ``[1, pool_size]``; a clamp to 1 yields the pool
    maximum and a realised FPR of zero.
    """
    return threshold_from_pool(nontarget_pool(batch.cosines, batch.labels), gamma_u)


def smoothed_threshold(previous, current, momentum):
    """Exponential moving average of thresholds; ``momentum=0`` returns ``current.t_u``."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    t = current.t_u if isinstance(current, ThresholdEstimate) else float(current)
    if previous is None or momentum == 0.0:
        return t
    return momentum * previous + (1.0 - momentum) * t
