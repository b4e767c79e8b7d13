"""The two reward signals: global quality and token-level semantic match.

Quality is the cosine between the mapped text summary vector and the video
summary vector. Semantic runs the full token pipeline: cost matrix ->
partial transport plan -> log-space fusion with vanilla attention -> fused
pooling -> mean over text tokens -> frozen 2-logit match head -> softmax,
taking the positive-class probability.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .costmatrix import CostWeights, PatchGrid, build_cost
from .fusion import DEFAULT_EPS_SMOOTH, fuse, fused_pool
from .neural_ot import OtMapArtifact
from .numerics import cosine, softmax
from .sinkhorn import PartialOTConfig, solve_partial_ot

__all__ = [
    "VtmHead",
    "RewardPair",
    "quality_reward",
    "semantic_reward",
    "match_feature",
    "grouped_rewards",
    "save_vtm",
    "load_vtm",
]

VTM_MAGIC = b"OTVTM1"


@dataclass
class VtmHead:
    """Affine classifier to (negative-match, positive-match) logits; index 1
    is the positive class."""

    weight: np.ndarray  # (2, d)
    bias: np.ndarray  # (2,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 2:
            raise ValueError(f"weight must have shape (2, d), got {w.shape}")
        if b.shape != (2,):
            raise ValueError(f"bias must have shape (2,), got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        self.weight = w
        self.bias = b

    def logits(self, feature: np.ndarray) -> np.ndarray:
        return self.weight @ feature + self.bias


@dataclass(frozen=True)
class RewardPair:
    """Validated (quality, semantic) reward values."""

    quality: float
    semantic: float

    def __post_init__(self):
        if not -1.0 <= self.quality <= 1.0:
            raise ValueError(f"quality reward out of [-1, 1]: {self.quality}")
        if not 0.0 < self.semantic < 1.0:
            raise ValueError(f"semantic reward out of (0, 1): {self.semantic}")


def quality_reward(ot_map: OtMapArtifact, y_cls, xhat_cls) -> float:
    """Cosine similarity between the mapped text summary and the video summary."""
    mapped = ot_map.apply(np.asarray(y_cls, dtype=np.float64))
    return cosine(mapped, xhat_cls)


def match_feature(
    text_tokens,
    patch_tokens,
    attention,
    grid: PatchGrid,
    weights: CostWeights | None = None,
    cfg: PartialOTConfig | None = None,
    eps_smooth: float = DEFAULT_EPS_SMOOTH,
) -> np.ndarray:
    """Pooled feature the match head consumes: mean over fused token rows."""
    cost = build_cost(text_tokens, patch_tokens, attention, grid, weights)
    plan = solve_partial_ot(cost, cfg)
    fused = fuse(attention, plan, eps_smooth)
    return fused_pool(fused, patch_tokens).mean(axis=0)


def semantic_reward(
    text_tokens,
    patch_tokens,
    attention,
    grid: PatchGrid,
    weights: CostWeights | None = None,
    cfg: PartialOTConfig | None = None,
    vtm: VtmHead | None = None,
    eps_smooth: float = DEFAULT_EPS_SMOOTH,
) -> float:
    """Positive-match probability of the fused, pooled token features."""
    if vtm is None:
        raise ValueError("semantic_reward needs a match head")
    feature = match_feature(text_tokens, patch_tokens, attention, grid, weights, cfg, eps_smooth)
    return float(softmax(vtm.logits(feature))[1])


def grouped_rewards(pairs) -> list[RewardPair]:
    """Validate a batch of (quality, semantic) values, preserving order."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty reward batch")
    out = []
    for item in pairs:
        if isinstance(item, RewardPair):
            out.append(RewardPair(item.quality, item.semantic))
        else:
            q, s = item
            out.append(RewardPair(float(q), float(s)))
    return out


def save_vtm(head: VtmHead, path):
    """Binary head format: magic, u32 feature dim, f64 weights then biases."""
    with open(path, "wb") as fh:
        fh.write(VTM_MAGIC)
        fh.write(struct.pack("<I", head.weight.shape[1]))
        fh.write(np.ascontiguousarray(head.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(head.bias, dtype="<f8").tobytes())


def load_vtm(path) -> VtmHead:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(VTM_MAGIC)] != VTM_MAGIC:
        raise ValueError(f"bad-magic: not a match-head file: {path}")
    off = len(VTM_MAGIC)
    try:
        (dim,) = struct.unpack_from("<I", data, off)
    except struct.error as exc:
        raise ValueError(f"truncated: match-head file too short: {path}") from exc
    off += 4
    need = 8 * (2 * dim + 2)
    blob = data[off : off + need]
    if len(blob) != need:
        raise ValueError(f"truncated: match-head file too short: {path}")
    flat = np.frombuffer(blob, dtype="<f8")
    return VtmHead(weight=flat[: 2 * dim].reshape(2, dim).copy(), bias=flat[2 * dim :].copy())
