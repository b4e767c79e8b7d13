"""Log-space fusion of vanilla attention with a transport plan.

Fused attention is proportional, entrywise, to (A + eps)(P + eps), with the
product renormalized per row. Adding the logs and exponentiating is the same
arithmetic; the direct product form is used because no intermediate can
underflow once eps > 0. The plan acts as a constant structural prior:
derivatives are defined with respect to A only, and `fuse_vjp` implements
that convention for hand-rolled backprop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["FusedAttention", "fuse", "fuse_vjp", "fused_pool"]

DEFAULT_EPS_SMOOTH = 1e-8


@dataclass(frozen=True)
class FusedAttention:
    """Row-stochastic fused attention and the smoothing constant used."""

    A_tilde: np.ndarray
    eps_smooth: float


def _unwrap(p) -> np.ndarray:
    return np.asarray(getattr(p, "plan", p), dtype=np.float64)


def fuse(attention, plan, eps_smooth: float = DEFAULT_EPS_SMOOTH) -> FusedAttention:
    """Combine attention with a plan: row-normalized (A + eps) * (P + eps)."""
    a = np.asarray(attention, dtype=np.float64)
    p = _unwrap(plan)
    if a.shape != p.shape:
        raise ValueError(f"shape mismatch: attention {a.shape} vs plan {p.shape}")
    if not eps_smooth > 0:
        raise ValueError(f"eps_smooth must be > 0, got {eps_smooth}")
    w = (a + eps_smooth) * (p + eps_smooth)
    return FusedAttention(A_tilde=w / w.sum(axis=1, keepdims=True), eps_smooth=eps_smooth)


def fuse_vjp(attention, plan, eps_smooth: float, upstream: np.ndarray) -> np.ndarray:
    """d(sum(upstream * A_tilde))/dA with the plan held fixed.

    For row r with q = P_r + eps and weights w = (A_r + eps) * q,
    A~_rj = w_j / S, so dA~_rj/dA_rk = q_k (delta_jk - A~_rj) / S.
    """
    a = np.asarray(attention, dtype=np.float64)
    p = _unwrap(plan)
    u = np.asarray(upstream, dtype=np.float64)
    if not (a.shape == p.shape == u.shape):
        raise ValueError("shape mismatch in fuse_vjp")
    q = p + eps_smooth
    w = (a + eps_smooth) * q
    s = w.sum(axis=1, keepdims=True)
    a_tilde = w / s
    return q / s * (u - (u * a_tilde).sum(axis=1, keepdims=True))


def fused_pool(fused, patches) -> np.ndarray:
    """Attention-weighted patch pooling: row i = sum_j A~_ij * patch_j."""
    a_tilde = np.asarray(getattr(fused, "A_tilde", fused), dtype=np.float64)
    x = np.asarray(patches, dtype=np.float64)
    if a_tilde.ndim != 2 or x.ndim != 2 or a_tilde.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: attention {a_tilde.shape} vs patches {x.shape}")
    return a_tilde @ x
