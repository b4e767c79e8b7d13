"""Spatio-temporal, semantics-aware cost matrices over text and patch tokens.

The cost between text token i and video patch j combines a cosine-based
semantic term with temporal and spatial penalties anchored at the
attention-weighted expected frame index and 2-D grid position of token i.
Each component is range-normalized to [0, 1] before weighting, and the
weighted sum is min-max normalized again, so solver inputs always live in
[0, 1] with at least one exact zero (unless the whole matrix is constant,
which maps to all-zeros instead of 0/0 NaNs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PatchGrid",
    "CostWeights",
    "CostMatrix",
    "check_attention",
    "expected_frame",
    "expected_position",
    "build_cost",
]

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class PatchGrid:
    """Frame index and 2-D position metadata for M = frames*height*width patches.

    Patches are ordered frame-major, then row-major within the frame, i.e.
    index = (f * height + r) * width + c. Frame indices are 0-based.
    """

    frames: int
    height: int
    width: int
    frame_index: np.ndarray  # (M,) float
    position: np.ndarray  # (M, 2) float, (row, col) grid coordinates

    def __post_init__(self):
        m = self.frames * self.height * self.width
        fi = np.asarray(self.frame_index, dtype=np.float64)
        pos = np.asarray(self.position, dtype=np.float64)
        if fi.shape != (m,):
            raise ValueError(f"frame_index must have shape ({m},), got {fi.shape}")
        if pos.shape != (m, 2):
            raise ValueError(f"position must have shape ({m}, 2), got {pos.shape}")
        if np.any(fi < 0) or np.any(fi >= self.frames):
            raise ValueError("frame_index entries must lie in [0, frames)")
        if np.any(pos[:, 0] < 0) or np.any(pos[:, 0] >= self.height):
            raise ValueError("row positions must lie in [0, height)")
        if np.any(pos[:, 1] < 0) or np.any(pos[:, 1] >= self.width):
            raise ValueError("col positions must lie in [0, width)")
        object.__setattr__(self, "frame_index", fi)
        object.__setattr__(self, "position", pos)

    @property
    def num_patches(self) -> int:
        return self.frames * self.height * self.width

    @classmethod
    def regular(cls, frames: int, height: int = 1, width: int = 1) -> "PatchGrid":
        """Grid with one patch per (frame, row, col) cell in canonical order."""
        f, r, c = np.meshgrid(
            np.arange(frames), np.arange(height), np.arange(width), indexing="ij"
        )
        return cls(
            frames=frames,
            height=height,
            width=width,
            frame_index=f.reshape(-1).astype(np.float64),
            position=np.stack([r.reshape(-1), c.reshape(-1)], axis=1).astype(np.float64),
        )


@dataclass(frozen=True)
class CostWeights:
    """Temporal (gamma) and spatial (eta) penalty weights."""

    gamma: float = 0.2
    eta: float = 0.2

    def __post_init__(self):
        for name, w in (("gamma", self.gamma), ("eta", self.eta)):
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {w}")


@dataclass(frozen=True)
class CostMatrix:
    """Final cost in [0, 1] plus its three normalized components."""

    C: np.ndarray
    semantic: np.ndarray
    temporal: np.ndarray
    spatial: np.ndarray
    weights: CostWeights = field(default_factory=CostWeights)


def check_attention(a, num_patches: int | None = None) -> np.ndarray:
    """Validate a row-stochastic attention matrix; returns it as float64."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"bad-attention: expected 2-D attention, got shape {a.shape}")
    if num_patches is not None and a.shape[1] != num_patches:
        raise ValueError(
            f"bad-attention: {a.shape[1]} columns but grid has {num_patches} patches"
        )
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("bad-attention: entries must be finite and nonnegative")
    if np.any(np.abs(a.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise ValueError("bad-attention: rows must sum to 1")
    return a


def expected_frame(a, grid: PatchGrid) -> np.ndarray:
    """Attention-weighted expected frame index per text token, in [0, frames-1]."""
    a = check_attention(a, grid.num_patches)
    return a @ grid.frame_index


def expected_position(a, grid: PatchGrid) -> np.ndarray:
    """Attention-weighted expected (row, col) position per text token."""
    a = check_attention(a, grid.num_patches)
    return a @ grid.position


def _range_normalize(m: np.ndarray) -> np.ndarray:
    """Min-max normalize into [0, 1]; a constant matrix maps to all-zeros."""
    lo = float(m.min())
    hi = float(m.max())
    if hi - lo <= 0.0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def build_cost(text, patches, attention, grid: PatchGrid, weights: CostWeights | None = None) -> CostMatrix:
    """Assemble the normalized cost matrix from embeddings, attention and grid.

    semantic(i,j) = 1 - cos(text_i, patch_j)
    temporal(i,j) = |expected_frame_i - frame_j|
    spatial(i,j)  = ||expected_position_i - position_j||_2
    """
    if weights is None:
        weights = CostWeights()
    y = np.asarray(text, dtype=np.float64)
    x = np.asarray(patches, dtype=np.float64)
    if y.ndim != 2 or x.ndim != 2 or y.shape[1] != x.shape[1]:
        raise ValueError(f"embedding shape mismatch: text {y.shape} vs patches {x.shape}")
    if x.shape[0] != grid.num_patches:
        raise ValueError(f"{x.shape[0]} patch rows but grid has {grid.num_patches} patches")
    y_norms = np.linalg.norm(y, axis=1)
    x_norms = np.linalg.norm(x, axis=1)
    if np.any(y_norms == 0) or np.any(x_norms == 0):
        raise ValueError("degenerate-token: zero-norm embedding row")
    a = check_attention(attention, grid.num_patches)
    if a.shape[0] != y.shape[0]:
        raise ValueError(f"bad-attention: {a.shape[0]} rows but {y.shape[0]} text tokens")

    semantic = 1.0 - (y / y_norms[:, None]) @ (x / x_norms[:, None]).T
    tau = a @ grid.frame_index
    temporal = np.abs(tau[:, None] - grid.frame_index[None, :])
    pi = a @ grid.position
    diff = pi[:, None, :] - grid.position[None, :, :]
    spatial = np.sqrt((diff * diff).sum(axis=2))

    semantic = _range_normalize(semantic)
    temporal = _range_normalize(temporal)
    spatial = _range_normalize(spatial)
    c = _range_normalize(semantic + weights.gamma * temporal + weights.eta * spatial)
    return CostMatrix(C=c, semantic=semantic, temporal=temporal, spatial=spatial, weights=weights)
