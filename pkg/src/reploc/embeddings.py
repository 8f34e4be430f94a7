"""Per-frame embedding sequences: file I/O and synthetic generation.

An embedding sequence is an (n_frames, dim) float32 matrix, one row per
video frame.  Sequences are stored in the REMB binary format:

    magic "REMB" | u32 version=1 | u32 n_frames | u32 dim
    | n_frames*dim little-endian f32, row-major
    | optional trailing f32 fps

Segment annotations use a plain text format, one "start end" pair per
line (inclusive frame indices), with '#' comments and blank lines
ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, SizeMismatchError

REMB_MAGIC = b"REMB"
REMB_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class FrameEmbeddingSequence:
    """N per-frame feature vectors of dimension D."""

    n_frames: int
    dim: int
    data: np.ndarray          # (n_frames, dim) float32
    fps: float | None = None  # metadata only

    def validate(self) -> None:
        if self.n_frames < 1 or self.dim < 1:
            raise DataError(
                f"need n_frames >= 1 and dim >= 1, got {self.n_frames}x{self.dim}"
            )
        if self.data.shape != (self.n_frames, self.dim):
            raise DataError(
                f"data shape {self.data.shape} does not match "
                f"{self.n_frames}x{self.dim}"
            )
        if not np.isfinite(self.data).all():
            raise DataError("embedding data contains non-finite values")


def make_sequence(data: np.ndarray, fps: float | None = None) -> FrameEmbeddingSequence:
    """Wrap a 2-D array as a validated float32 sequence."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DataError(f"embedding data must be 2-D, got {data.ndim}-D")
    seq = FrameEmbeddingSequence(data.shape[0], data.shape[1], data, fps)
    seq.validate()
    return seq


def save_embeddings(seq: FrameEmbeddingSequence, path) -> None:
    """Write a sequence in REMB format. Inverts load_embeddings bit-exactly."""
    seq.validate()
    payload = np.ascontiguousarray(seq.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(REMB_MAGIC, REMB_VERSION, seq.n_frames, seq.dim))
        fh.write(payload.tobytes())
        if seq.fps is not None:
            fh.write(struct.pack("<f", seq.fps))


def load_embeddings(path) -> FrameEmbeddingSequence:
    """Read a REMB file back into a sequence."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than REMB header")
    magic, version, n_frames, dim = _HEADER.unpack_from(raw)
    if magic != REMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {REMB_MAGIC!r}")
    if version != REMB_VERSION:
        raise FormatError(f"{path}: unsupported REMB version {version}")
    if n_frames < 1 or dim < 1:
        raise FormatError(f"{path}: invalid header counts {n_frames}x{dim}")
    body = len(raw) - _HEADER.size
    expected = 4 * n_frames * dim
    if body == expected:
        fps = None
    elif body == expected + 4:
        fps = struct.unpack_from("<f", raw, _HEADER.size + expected)[0]
    else:
        raise SizeMismatchError(
            f"{path}: payload is {body} bytes, expected {expected} "
            f"(or {expected + 4} with fps) for {n_frames}x{dim}"
        )
    data = np.frombuffer(
        raw, dtype="<f4", count=n_frames * dim, offset=_HEADER.size
    ).reshape(n_frames, dim)
    data = np.ascontiguousarray(data, dtype=np.float32)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: embedding data contains non-finite values")
    return FrameEmbeddingSequence(n_frames, dim, data, fps)


@dataclass
class SegmentAnnotation:
    """Ordered list of (start, end) repetitive segments, inclusive bounds."""

    segments: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, n_frames: int | None = None) -> None:
        prev_end = -1
        for s, e in self.segments:
            if s < 0 or e < s:
                raise DataError(f"bad segment ({s}, {e})")
            if s <= prev_end:
                raise DataError(
                    f"segment ({s}, {e}) overlaps or is out of order"
                )
            if n_frames is not None and e >= n_frames:
                raise DataError(
                    f"segment ({s}, {e}) exceeds frame count {n_frames}"
                )
            prev_end = e

    def frame_labels(self, n_frames: int) -> np.ndarray:
        """Per-frame boolean repetitive indicator."""
        self.validate(n_frames)
        labels = np.zeros(n_frames, dtype=bool)
        for s, e in self.segments:
            labels[s : e + 1] = True
        return labels


def save_annotation(ann: SegmentAnnotation, path) -> None:
    ann.validate()
    with open(path, "w") as fh:
        fh.write("# start end (inclusive frame indices)\n")
        for s, e in ann.segments:
            fh.write(f"{s} {e}\n")


def load_annotation(path) -> SegmentAnnotation:
    segments = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 2:
                raise FormatError(
                    f"{path}:{lineno}: expected 'start end', got {line.rstrip()!r}"
                )
            try:
                s, e = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: non-integer segment bounds {line.rstrip()!r}"
                ) from None
            segments.append((s, e))
    ann = SegmentAnnotation(segments)
    try:
        ann.validate()
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ann


@dataclass
class SyntheticSpec:
    """Recipe for a labeled synthetic embedding sequence.

    segment_plan entries are (kind, length) with kind one of
    "repetitive" / "non-repetitive".  Repetitive segments trace a noisy
    sinusoid in the first two coordinates with a period drawn from
    period_range; everything else is a smoothed Gaussian random walk.
    """

    dim: int
    segment_plan: list[tuple[str, int]]
    period_range: tuple[int, int] = (8, 40)
    amplitude: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError("dim must be >= 2 (sinusoid uses two coordinates)")
        if not self.segment_plan:
            raise ConfigError("segment_plan is empty")
        for kind, length in self.segment_plan:
            if kind not in ("repetitive", "non-repetitive"):
                raise ConfigError(f"unknown segment kind {kind!r}")
            if length < 1:
                raise ConfigError(f"segment length {length} < 1")
        pmin, pmax = self.period_range
        if pmin < 2 or pmax < pmin:
            raise ConfigError(f"bad period_range {self.period_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


_WALK_SMOOTH = 5  # moving-average width for non-repetitive filler


def generate_synthetic(spec: SyntheticSpec) -> tuple[FrameEmbeddingSequence, SegmentAnnotation]:
    """Deterministically generate a labeled sequence from a spec.

    Raises ConfigError when a repetitive segment is shorter than its
    drawn period.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    pmin, pmax = spec.period_range
    rows: list[np.ndarray] = []
    segments: list[tuple[int, int]] = []
    cursor = 0
    for kind, length in spec.segment_plan:
        if kind == "repetitive":
            period = int(rng.integers(pmin, pmax + 1))
            if length < period:
                raise ConfigError(
                    f"repetitive segment of {length} frames is shorter than "
                    f"its drawn period {period}"
                )
            phase = rng.uniform(0.0, 2.0 * np.pi)
            offset = rng.normal(0.0, spec.amplitude, size=spec.dim)
            t = np.arange(length)
            # Use (t mod period) so frames one period apart get bit-identical
            # angles: with zero noise their distance is exactly 0.
            angle = 2.0 * np.pi * ((t % period) / period) + phase
            block = np.tile(offset, (length, 1))
            block[:, 0] += spec.amplitude * np.sin(angle)
            block[:, 1] += spec.amplitude * np.cos(angle)
            if spec.noise_sigma > 0:
                block += rng.normal(0.0, spec.noise_sigma, size=block.shape)
            segments.append((cursor, cursor + length - 1))
        else:
            steps = rng.normal(size=(length + _WALK_SMOOTH - 1, spec.dim))
            walk = np.cumsum(steps, axis=0)
            kernel = np.ones(_WALK_SMOOTH) / _WALK_SMOOTH
            smooth = np.empty((length, spec.dim))
            for d in range(spec.dim):
                smooth[:, d] = np.convolve(walk[:, d], kernel, mode="valid")
            smooth -= smooth.mean(axis=0, keepdims=True)
            scale = float(np.sqrt(np.mean(smooth**2)))
            if scale > 0:
                smooth *= spec.amplitude / scale
            block = smooth
        rows.append(block.astype(np.float32))
        cursor += length
    data = np.concatenate(rows, axis=0)
    seq = make_sequence(data)
    ann = SegmentAnnotation(segments)
    ann.validate(seq.n_frames)
    return seq, ann
