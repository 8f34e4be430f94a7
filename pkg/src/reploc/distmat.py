"""Pairwise frame-distance matrices and training sub-block extraction.

The distance matrix of an n-frame video is the n x n matrix of Euclidean
distances between frame embeddings; repetitive motion shows up as low
bands parallel to the main diagonal.  Training samples are square blocks
centered on the diagonal, paired with the matching blocks of the binary
same-segment matrix, both resized to a fixed canonical resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import FrameEmbeddingSequence, SegmentAnnotation
from .errors import ConfigError, DataError, ShapeError


@dataclass
class DistanceMatrix:
    """Symmetric n x n matrix of pairwise embedding distances."""

    n: int
    values: np.ndarray  # (n, n) float64, zero diagonal


@dataclass
class AnnotationMatrix:
    """Binary n x n matrix: 1 iff both frames lie in the same repetitive segment."""

    n: int
    values: np.ndarray  # (n, n) uint8


@dataclass
class SubBlock:
    """A diagonal training sample: raw crops plus canonical-resolution versions."""

    center: int
    size: int
    input: np.ndarray           # (size, size) crop of the distance matrix
    target: np.ndarray          # (size, size) binary crop of the annotation matrix
    resized_input: np.ndarray   # (canonical, canonical), min-max normalized
    resized_target: np.ndarray  # (canonical, canonical), re-binarized


@dataclass
class SamplerConfig:
    size_min: int = 100
    size_max: int = 200
    stride: int = 25
    canonical: int = 140

    def validate(self) -> None:
        if self.size_min < 2 or self.size_max < self.size_min:
            raise ConfigError(f"bad size range [{self.size_min}, {self.size_max}]")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.canonical < 1:
            raise ConfigError("canonical size must be >= 1")


def build_distance_matrix(seq: FrameEmbeddingSequence) -> DistanceMatrix:
    """Euclidean distances between all frame pairs, each computed once.

    Exactly symmetric with an exactly zero diagonal.
    """
    seq.validate()
    x = seq.data.astype(np.float64)
    n = seq.n_frames
    m = np.zeros((n, n), dtype=np.float64)
    for i in range(n - 1):
        diff = x[i + 1 :] - x[i]
        d = np.sqrt(np.einsum("nd,nd->n", diff, diff))
        m[i, i + 1 :] = d
        m[i + 1 :, i] = d
    return DistanceMatrix(n, m)


def build_annotation_matrix(n: int, ann: SegmentAnnotation) -> AnnotationMatrix:
    """Binary same-segment matrix for n frames.

    Frames in two different repetitive segments still get 0.
    """
    ann.validate()
    for s, e in ann.segments:
        if e >= n:
            raise DataError(f"segment ({s}, {e}) out of range for n={n}")
    a = np.zeros((n, n), dtype=np.uint8)
    for s, e in ann.segments:
        a[s : e + 1, s : e + 1] = 1
    return AnnotationMatrix(n, a)


_LANCZOS_A = 3


def _lanczos_kernel(x: np.ndarray) -> np.ndarray:
    """sinc(x) * sinc(x/3) inside |x| < 3, zero outside."""
    out = np.sinc(x) * np.sinc(x / _LANCZOS_A)
    return np.where(np.abs(x) < _LANCZOS_A, out, 0.0)


def lanczos_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) row-resampling matrix for Lanczos-3.

    Edge taps are clamped to the nearest valid sample and each output
    row is normalized to sum to 1, so constants are preserved exactly
    and out_size == in_size yields the identity.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError("sizes must be >= 1")
    w = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        center = (o + 0.5) * scale - 0.5
        base = int(np.floor(center))
        taps = np.arange(base - _LANCZOS_A + 1, base + _LANCZOS_A + 1)
        weights = _lanczos_kernel(center - taps)
        np.add.at(w[o], np.clip(taps, 0, in_size - 1), weights)
        w[o] /= w[o].sum()
    return w


def lanczos_resize(block: np.ndarray, out_size: int) -> np.ndarray:
    """Separable Lanczos-3 resampling of a square block."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ShapeError(f"expected a square 2-D block, got shape {block.shape}")
    w = lanczos_weights(block.shape[0], out_size)
    return w @ block @ w.T


def normalize_block(block: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant blocks map to zeros."""
    lo = float(block.min())
    hi = float(block.max())
    if hi <= lo:
        return np.zeros_like(block)
    return (block - lo) / (hi - lo)


def _make_subblock(
    m: DistanceMatrix, a: AnnotationMatrix, center: int, size: int, canonical: int
) -> SubBlock:
    start = min(max(center - size // 2, 0), m.n - size)
    stop = start + size
    raw_in = m.values[start:stop, start:stop]
    raw_tgt = a.values[start:stop, start:stop]
    resized_in = normalize_block(lanczos_resize(raw_in, canonical))
    resized_tgt = (lanczos_resize(raw_tgt.astype(np.float64), canonical) > 0.5).astype(
        np.float32
    )
    return SubBlock(
        center=center,
        size=size,
        input=raw_in,
        target=raw_tgt,
        resized_input=resized_in.astype(np.float32),
        resized_target=resized_tgt,
    )


def sample_training_subblocks(
    m: DistanceMatrix,
    a: AnnotationMatrix,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> list[SubBlock]:
    """Diagonal sub-blocks with randomized sizes (temporal-scale augmentation).

    Centers advance along the diagonal with the configured stride; each
    block's size is drawn uniformly from the configured range, clamped
    to the matrix.  Blocks overhanging the ends are shifted inward.  A
    matrix smaller than the minimum size yields one whole-matrix block.
    """
    cfg.validate()
    if m.n != a.n:
        raise ShapeError(f"matrix sizes differ: {m.n} vs {a.n}")
    n = m.n
    if n < 2:
        raise ShapeError("need at least 2 frames to sample sub-blocks")
    size_min = min(cfg.size_min, n)
    size_max = min(cfg.size_max, n)
    if n <= cfg.size_min:
        return [_make_subblock(m, a, n // 2, n, cfg.canonical)]
    blocks = []
    for center in range(0, n, cfg.stride):
        size = int(rng.integers(size_min, size_max + 1))
        blocks.append(_make_subblock(m, a, center, size, cfg.canonical))
    return blocks
