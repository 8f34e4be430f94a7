"""Plain PGM/PPM image dumps of distance matrices and label bars."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

GREEN = np.array([0, 255, 0], dtype=np.uint8)
RED = np.array([255, 0, 0], dtype=np.uint8)


def to_grayscale(values: np.ndarray) -> np.ndarray:
    """Min-max scale a matrix to uint8 0..255 (constant input maps to 0)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(values: np.ndarray, path) -> None:
    """P5 grayscale dump of a matrix, min-max scaled."""
    gray = to_grayscale(values)
    if gray.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D matrix, got shape {gray.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def write_ppm(rgb: np.ndarray, path) -> None:
    """P6 color dump of an (H, W, 3) uint8 array."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"PPM needs (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(rgb.tobytes())


def label_bar(labels: np.ndarray, height: int) -> np.ndarray:
    """Horizontal green/red bar: green where the label is repetitive."""
    labels = np.asarray(labels, dtype=bool)
    row = np.where(labels[:, None], GREEN[None, :], RED[None, :])
    return np.broadcast_to(row[None, :, :], (height, labels.size, 3)).copy()


def render_overview(
    matrix: np.ndarray,
    pred_labels: np.ndarray | None = None,
    gt_labels: np.ndarray | None = None,
) -> np.ndarray:
    """Grayscale distance matrix with optional prediction/ground-truth bars.

    Bars are appended below the matrix (prediction first), each
    ceil(0.05 * n) pixels tall.
    """
    gray = to_grayscale(matrix)
    n = gray.shape[0]
    if gray.shape != (n, n):
        raise ShapeError(f"matrix must be square, got {gray.shape}")
    parts = [np.repeat(gray[:, :, None], 3, axis=2)]
    bar_h = math.ceil(0.05 * n)
    for labels in (pred_labels, gt_labels):
        if labels is None:
            continue
        if len(labels) != n:
            raise ShapeError(f"label bar length {len(labels)} != matrix side {n}")
        parts.append(label_bar(labels, bar_h))
    return np.concatenate(parts, axis=0)
