"""Shared dense linear-algebra and stable-log primitives.

Everything works on float64 numpy arrays in row-major (C) order. All
functions are pure; concurrent callers are safe.
"""

from __future__ import annotations

import numpy as np

__all__ = ["logsumexp_row", "cosine", "pairwise_sq_dist", "softmax"]


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _as_matrix(m) -> np.ndarray:
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def logsumexp_row(v) -> float:
    """log(sum(exp(v))), max-subtracted so inputs up to +-700 cannot overflow."""
    v = _as_vector(v)
    if v.size == 0:
        raise ValueError("empty-input: logsumexp_row needs at least one element")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def cosine(a, b) -> float:
    """Cosine similarity a.b / (|a||b|), clipped into [-1, 1] against round-off."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate-vector: cosine undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between rows of a (n x d) and b (m x d).

    Uses |x-y|^2 = |x|^2 + |y|^2 - 2 x.y; negative values from cancellation
    are clamped to 0 so downstream costs stay nonnegative.
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]} columns")
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def softmax(v) -> np.ndarray:
    """Shift-invariant softmax of a vector; output is positive and sums to 1."""
    v = _as_vector(v)
    if v.size == 0:
        raise ValueError("empty-input: softmax needs at least one element")
    e = np.exp(v - np.max(v))
    return e / e.sum()
