"""Sliding-window evaluation along the distance-matrix diagonal.

Square windows are placed on the diagonal at a fixed stride (end windows
shifted inward so every frame is covered), classified by the model, and
each frame's score is the mean of the predictions it received from all
covering windows.  A frame is repetitive iff its mean score strictly
exceeds the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distmat import DistanceMatrix, lanczos_resize, normalize_block
from .embeddings import SegmentAnnotation
from .errors import ConfigError, ShapeError


@dataclass
class InferConfig:
    window: int = 140
    stride: int = 35
    threshold: float = 0.5
    score_rule: str = "diagonal"  # or "row-mean"
    batch_size: int = 8

    def validate(self) -> None:
        if self.window < 1 or not 1 <= self.stride <= self.window:
            raise ConfigError(
                f"need 1 <= stride <= window, got stride={self.stride} window={self.window}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.score_rule not in ("diagonal", "row-mean"):
            raise ConfigError(f"unknown score rule {self.score_rule!r}")


@dataclass
class FrameScores:
    n: int
    scores: np.ndarray  # per-frame mean prediction, float64
    counts: np.ndarray  # windows covering each frame
    labels: np.ndarray  # bool, scores > threshold


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Window start offsets covering [0, n); the last one is shifted inward."""
    if window >= n:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def threshold_labels(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Strictly-greater-than thresholding of per-frame scores."""
    return scores > threshold


def predict_frames(model, infer: InferConfig, m: DistanceMatrix) -> FrameScores:
    """Score every frame by averaging window predictions over its coverage."""
    infer.validate()
    n = m.n
    if n < 2:
        raise ShapeError(f"need at least 2 frames, got {n}")
    canonical = model.cfg.canonical
    window = min(infer.window, n)
    starts = window_starts(n, window, infer.stride)
    sums = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for lo in range(0, len(starts), infer.batch_size):
        chunk = starts[lo : lo + infer.batch_size]
        batch = np.empty((len(chunk), 1, canonical, canonical), dtype=np.float32)
        for b, s in enumerate(chunk):
            block = m.values[s : s + window, s : s + window]
            batch[b, 0] = normalize_block(lanczos_resize(block, canonical))
        preds = model.forward(batch, train=False)[-1]
        for b, s in enumerate(chunk):
            block_pred = np.clip(lanczos_resize(preds[b, 0], window), 0.0, 1.0)
            if infer.score_rule == "diagonal":
                frame_scores = np.diagonal(block_pred)
            else:
                frame_scores = block_pred.mean(axis=1)
            sums[s : s + window] += frame_scores
            counts[s : s + window] += 1
    scores = sums / counts
    return FrameScores(n, scores, counts, threshold_labels(scores, infer.threshold))


def extract_segments(scores: FrameScores, min_len: int = 1) -> SegmentAnnotation:
    """Maximal runs of repetitive labels as inclusive (start, end) segments."""
    if min_len < 1:
        raise ConfigError(f"min_len must be >= 1, got {min_len}")
    segments = []
    start = None
    for i, flag in enumerate(scores.labels):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start >= min_len:
                segments.append((start, i - 1))
            start = None
    if start is not None and scores.n - start >= min_len:
        segments.append((start, scores.n - 1))
    return SegmentAnnotation(segments)
