"""Alignment diagnostics: mutual k-NN overlap, rank correlation of pairwise
distances, and distance histograms for external plotting.

Neighbor computations are exact O(n^2); desk-scale inputs make index
structures pointless.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .numerics import pairwise_sq_dist

__all__ = [
    "AlignReport",
    "mutual_knn",
    "spearman_pairwise",
    "distance_histogram",
    "build_align_report",
]


def _knn_sets(x: np.ndarray, k: int) -> list[frozenset]:
    d = pairwise_sq_dist(x, x)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return [frozenset(order[i, :k].tolist()) for i in range(x.shape[0])]


def mutual_knn(a, b, k: int) -> float:
    """Mean fraction of shared k-nearest-neighbor indices between paired sets.

    Neighbors are computed within each set by Euclidean distance, excluding
    the point itself; rows of `a` and `b` correspond by index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"paired sets need equal row counts: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n={n}, got {k}")
    sets_a = _knn_sets(a, k)
    sets_b = _knn_sets(b, k)
    return float(np.mean([len(sa & sb) / k for sa, sb in zip(sets_a, sets_b)]))


def _upper_distances(x: np.ndarray) -> np.ndarray:
    d = np.sqrt(pairwise_sq_dist(x, x))
    iu = np.triu_indices(x.shape[0], k=1)
    return d[iu]


def spearman_pairwise(before, after) -> float:
    """Spearman rank correlation between the two sets' pairwise distances.

    Ties get average ranks. Raises if either distance list is constant,
    where ranks are degenerate.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.ndim != 2 or after.ndim != 2 or before.shape[0] != after.shape[0]:
        raise ValueError(f"row counts must match: {before.shape} vs {after.shape}")
    if before.shape[0] < 3:
        raise ValueError("need at least 3 points for rank correlation")
    d1 = _upper_distances(before)
    d2 = _upper_distances(after)
    if np.all(d1 == d1[0]) or np.all(d2 == d2[0]):
        raise ValueError("degenerate-ranks: all pairwise distances equal on one side")
    return float(stats.spearmanr(d1, d2).statistic)


def distance_histogram(x, bins: int, value_range: tuple[float, float]) -> np.ndarray:
    """Histogram of pairwise Euclidean distances; counts sum to n(n-1)/2.

    Distances outside [lo, hi] are clamped into the edge bins so the total
    is exact and two histograms over the same range stay comparable.
    """
    lo, hi = value_range
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid range: ({lo}, {hi})")
    x = np.asarray(x, dtype=np.float64)
    d = np.clip(_upper_distances(x), lo, hi)
    counts, _ = np.histogram(d, bins=bins, range=(lo, hi))
    return counts


@dataclass
class AlignReport:
    """Pre/post alignment statistics with shared-bin distance histograms."""

    mutual_knn_pre: float
    mutual_knn_post: float
    spearman: float
    k: int
    bin_edges: np.ndarray
    histogram_pre: np.ndarray
    histogram_post: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mutual_knn_pre": self.mutual_knn_pre,
            "mutual_knn_post": self.mutual_knn_post,
            "spearman": self.spearman,
            "k": self.k,
            "bin_edges": [float(v) for v in self.bin_edges],
            "histogram_pre": [int(v) for v in self.histogram_pre],
            "histogram_post": [int(v) for v in self.histogram_post],
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_histogram_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count_pre", "count_post"])
            for i in range(len(self.histogram_pre)):
                writer.writerow(
                    [
                        format(self.bin_edges[i], ".17g"),
                        format(self.bin_edges[i + 1], ".17g"),
                        int(self.histogram_pre[i]),
                        int(self.histogram_post[i]),
                    ]
                )


def build_align_report(text, video, mapped, k: int = 10, bins: int = 40) -> AlignReport:
    """Compare alignment before (raw text) and after (mapped text) against video.

    Histograms cover the pairwise distances of raw and mapped text over a
    shared range so their counts can be compared bin by bin.
    """
    text = np.asarray(text, dtype=np.float64)
    video = np.asarray(video, dtype=np.float64)
    mapped = np.asarray(mapped, dtype=np.float64)
    pre = mutual_knn(text, video, k)
    post = mutual_knn(mapped, video, k)
    rho = spearman_pairwise(text, mapped)
    d_pre = _upper_distances(text)
    d_post = _upper_distances(mapped)
    hi = float(max(d_pre.max(), d_post.max())) * 1.001 + 1e-12
    edges = np.linspace(0.0, hi, bins + 1)
    return AlignReport(
        mutual_knn_pre=pre,
        mutual_knn_post=post,
        spearman=rho,
        k=k,
        bin_edges=edges,
        histogram_pre=distance_histogram(text, bins, (0.0, hi)),
        histogram_post=distance_histogram(mapped, bins, (0.0, hi)),
    )
