"""Dense linear algebra helpers, seeded random streams and order statistics.

Matrices are plain 2-D ``float64`` numpy arrays. The helpers here add the
shape and finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

# Named sub-streams: one seed yields independent data, init and shuffling
# streams, so drawing more of one never shifts the others.
STREAMS = ("data", "init", "shuffle", "pairs", "split", "classifier")


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return a


def matmul(a, b):
    """Matrix product with an explicit dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize_rows(m):
    """Scale every row to unit Euclidean norm.

    A zero row raises instead of being silently padded with an epsilon.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms[:, 0] == 0.0)
        raise ValueError(f"cannot normalise zero rows: {bad.tolist()}")
    return check_finite(m / norms, "normalised rows")


def kth_largest(values, k):
    """Return the k-th largest element (k=1 is the maximum), duplicates counted.

    Uses ``np.partition`` (introselect), i.e. expected linear time.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    if n == 0:
        raise ValueError("kth_largest of an empty sequence")
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return float(np.partition(v, n - k)[n - k])


def make_rng(seed, stream=None):
    """Build a ``np.random.Generator`` for ``seed``, optionally on a named sub-stream.

    Sub-streams are derived with ``SeedSequence`` spawn keys, so every
    (seed, stream) pair is an independent, reproducible PCG64 generator.
    """
    seed = int(seed)
    if stream is None:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if stream not in STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}; expected one of {STREAMS}")
    key = (STREAMS.index(stream),)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def rng_standard_normal(rng, n):
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(int(n))
