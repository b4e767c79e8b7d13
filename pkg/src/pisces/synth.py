"""Synthetic misaligned text/video embedding populations and embedding IO.

Video embeddings are Gaussian blobs at random class centers. Text
embeddings share that class structure but are pushed through a fixed random
orthogonal transform plus a global offset, so the two modalities have the
same topology in disjoint regions of space. By default the text side reuses
the exact video draws (an isometry, so within-modality distance ranks match
the video side exactly); setting `text_noise` redraws the within-cluster
noise at the given scale instead, which breaks per-point neighbor agreement
while keeping the cluster layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmbeddingSet",
    "SynthSpec",
    "EmbeddingFormatError",
    "generate",
    "write_emb",
    "read_emb",
    "read_emb_json",
]

EMB_MAGIC = b"OTEMB1"
MODALITIES = ("text", "video")
CENTER_SPREAD = 5.0


class EmbeddingFormatError(ValueError):
    """Raised for malformed embedding files (bad magic, truncation, ...)."""


@dataclass
class EmbeddingSet:
    """Fixed-dimension vectors with a modality tag and optional class labels."""

    modality: str
    vectors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"vectors must be a nonempty (n, d) matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors must be finite")
        self.vectors = v
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint32)
            if lab.shape != (v.shape[0],):
                raise ValueError(f"labels must have shape ({v.shape[0]},), got {lab.shape}")
            self.labels = lab

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a misaligned text/video cluster pair."""

    classes: int = 4
    dim: int = 8
    per_class: int = 50
    text_offset: float | tuple[float, ...] = 0.0
    rotation_seed: int | None = None  # None keeps the identity transform
    noise: float = 0.3
    seed: int = 0
    text_noise: float | None = None  # None reuses the video draws exactly

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {self.per_class}")
        if not self.noise > 0:
            raise ValueError(f"noise must be > 0, got {self.noise}")
        if self.text_noise is not None and not self.text_noise > 0:
            raise ValueError(f"text_noise must be > 0, got {self.text_noise}")

    def offset_vector(self) -> np.ndarray:
        off = self.text_offset
        if np.isscalar(off):
            return np.full(self.dim, float(off))
        off = np.asarray(off, dtype=np.float64)
        if off.shape != (self.dim,):
            raise ValueError(f"text_offset must be scalar or length-{self.dim}")
        return off


def _random_orthogonal(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    # fix signs so the factorization (and thus the transform) is unique
    return q * np.sign(np.diag(r))[None, :]


def generate(spec: SynthSpec) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Deterministically generate the (text, video) population pair."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, CENTER_SPREAD, size=(spec.classes, spec.dim))
    labels = np.repeat(np.arange(spec.classes, dtype=np.uint32), spec.per_class)
    n = labels.shape[0]
    video = centers[labels] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    if spec.text_noise is None:
        source = video
    else:
        source = centers[labels] + rng.normal(0.0, spec.text_noise, size=(n, spec.dim))
    if spec.rotation_seed is None:
        rotated = source
    else:
        rotated = source @ _random_orthogonal(spec.dim, spec.rotation_seed).T
    text = rotated + spec.offset_vector()[None, :]
    return (
        EmbeddingSet("text", text, labels.copy()),
        EmbeddingSet("video", video, labels.copy()),
    )


def write_emb(emb: EmbeddingSet, path):
    """Binary format: magic, u8 modality, u32 count, u32 dim, f64 data, labels."""
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<BII", MODALITIES.index(emb.modality), emb.n, emb.dim))
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f8").tobytes())
        if emb.labels is not None:
            fh.write(np.ascontiguousarray(emb.labels, dtype="<u4").tobytes())


def read_emb(path) -> EmbeddingSet:
    """Read the binary format back; labels are present iff trailing bytes exist."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise EmbeddingFormatError(f"bad-magic: not an embedding file: {path}")
    off = len(EMB_MAGIC)
    try:
        modality_code, count, dim = struct.unpack_from("<BII", data, off)
    except struct.error as exc:
        raise EmbeddingFormatError(f"truncated: embedding header incomplete: {path}") from exc
    off += 9
    if modality_code >= len(MODALITIES):
        raise EmbeddingFormatError(f"unknown modality code {modality_code}: {path}")
    if count == 0:
        raise EmbeddingFormatError(f"empty-set: embedding file has zero rows: {path}")
    if dim == 0 or count * dim * 8 > len(data):
        raise EmbeddingFormatError(f"dim-overflow: implausible count/dim {count}x{dim}: {path}")
    nbytes = count * dim * 8
    blob = data[off : off + nbytes]
    if len(blob) != nbytes:
        raise EmbeddingFormatError(f"truncated: embedding data incomplete: {path}")
    vectors = np.frombuffer(blob, dtype="<f8").reshape(count, dim).copy()
    off += nbytes
    rest = data[off:]
    labels = None
    if rest:
        if len(rest) != 4 * count:
            raise EmbeddingFormatError(f"truncated: labels block incomplete: {path}")
        labels = np.frombuffer(rest, dtype="<u4").copy()
    return EmbeddingSet(MODALITIES[modality_code], vectors, labels)


def read_emb_json(path) -> EmbeddingSet:
    """JSON import: array of {modality, vector, label?} with one shared modality."""
    with open(path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list) or not records:
        raise EmbeddingFormatError(f"empty-set: JSON import needs a nonempty array: {path}")
    modalities = {r["modality"] for r in records}
    if len(modalities) != 1:
        raise EmbeddingFormatError(f"mixed modalities in JSON import: {sorted(modalities)}")
    vectors = np.asarray([r["vector"] for r in records], dtype=np.float64)
    with_labels = [r for r in records if "label" in r and r["label"] is not None]
    if with_labels and len(with_labels) != len(records):
        raise EmbeddingFormatError("labels must be present on all records or none")
    labels = np.asarray([r["label"] for r in records], dtype=np.uint32) if with_labels else None
    return EmbeddingSet(modalities.pop(), vectors, labels)
