import math

import numpy as np
import pytest

from reploc.distmat import (
    SamplerConfig,
    build_annotation_matrix,
    build_distance_matrix,
    lanczos_resize,
    normalize_block,
    sample_training_subblocks,
)
from reploc.embeddings import SegmentAnnotation, make_sequence
from reploc.errors import DataError, ShapeError
from reploc.images import write_pgm


def distance_oracle(data: np.ndarray) -> np.ndarray:
    """Brute-force O(N^2 D) double loop."""
    n, d = data.shape
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc += (float(data[i, k]) - float(data[j, k])) ** 2
            m[i, j] = math.sqrt(acc)
    return m


def lanczos_kernel_scalar(x: float) -> float:
    if x == 0:
        return 1.0
    if abs(x) >= 3:
        return 0.0
    return (
        math.sin(math.pi * x) / (math.pi * x)
        * math.sin(math.pi * x / 3) / (math.pi * x / 3)
    )


def lanczos_oracle(block, out_size: int) -> np.ndarray:
    """Direct normalized kernel summation, no matrices."""
    s = len(block)
    scale = s / out_size
    res = np.zeros((out_size, out_size))
    for oy in range(out_size):
        cy = (oy + 0.5) * scale - 0.5
        by = math.floor(cy)
        for ox in range(out_size):
            cx = (ox + 0.5) * scale - 0.5
            bx = math.floor(cx)
            num = den = 0.0
            for ky in range(by - 2, by + 4):
                wy = lanczos_kernel_scalar(cy - ky)
                for kx in range(bx - 2, bx + 4):
                    w = wy * lanczos_kernel_scalar(cx - kx)
                    num += w * block[min(max(ky, 0), s - 1)][min(max(kx, 0), s - 1)]
                    den += w
            res[oy, ox] = num / den
    return res


class TestDistanceMatrix:
    def test_identical_frames_all_zero(self):
        seq = make_sequence(np.ones((5, 3), dtype=np.float32))
        m = build_distance_matrix(seq)
        assert np.array_equal(m.values, np.zeros((5, 5)))

    def test_three_four_five(self):
        seq = make_sequence(np.array([[0, 0], [3, 4]], dtype=np.float32))
        m = build_distance_matrix(seq)
        assert m.values[0, 1] == m.values[1, 0] == 5.0
        assert m.values[0, 0] == m.values[1, 1] == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        seq = make_sequence(rng.standard_normal((6, 4)).astype(np.float32))
        m = build_distance_matrix(seq)
        assert np.abs(m.values - distance_oracle(seq.data)).max() <= 1e-6

    def test_exact_symmetry_and_zero_diagonal(self):
        rng = np.random.default_rng(11)
        seq = make_sequence(rng.standard_normal((40, 8)).astype(np.float32))
        m = build_distance_matrix(seq)
        assert np.array_equal(m.values, m.values.T)
        assert np.array_equal(np.diag(m.values), np.zeros(40))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(13)
        seq = make_sequence(rng.standard_normal((30, 6)).astype(np.float32))
        m = build_distance_matrix(seq).values
        idx = rng.integers(0, 30, size=(500, 3))
        for i, j, k in idx:
            assert m[i, j] <= m[i, k] + m[k, j] + 1e-6


class TestAnnotationMatrix:
    def test_single_segment_block(self):
        a = build_annotation_matrix(6, SegmentAnnotation([(1, 3)]))
        expected = np.zeros((6, 6), dtype=np.uint8)
        expected[1:4, 1:4] = 1
        assert np.array_equal(a.values, expected)

    def test_no_segments(self):
        a = build_annotation_matrix(4, SegmentAnnotation([]))
        assert not a.values.any()

    def test_different_segments_stay_zero(self):
        a = build_annotation_matrix(6, SegmentAnnotation([(0, 1), (4, 5)]))
        assert a.values[0, 1] == 1 and a.values[4, 5] == 1
        assert a.values[1, 4] == 0 and a.values[0, 5] == 0

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            build_annotation_matrix(4, SegmentAnnotation([(2, 5)]))

    def test_matches_same_segment_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            n = int(rng.integers(5, 40))
            segments = []
            cursor = 0
            while cursor < n - 2:
                s = cursor + int(rng.integers(0, 3))
                e = min(s + int(rng.integers(0, 6)), n - 1)
                if s > e:
                    break
                segments.append((s, e))
                cursor = e + 2
            ann = SegmentAnnotation(segments)
            a = build_annotation_matrix(n, ann)
            for i in range(n):
                for j in range(n):
                    same = any(s <= i <= e and s <= j <= e for s, e in segments)
                    assert a.values[i, j] == int(same)

    def test_rebinarization_idempotent(self):
        a = build_annotation_matrix(8, SegmentAnnotation([(2, 5)]))
        assert np.array_equal((a.values > 0.5).astype(np.uint8), a.values)


class TestLanczos:
    def test_same_size_is_identity(self):
        rng = np.random.default_rng(3)
        block = rng.standard_normal((7, 7))
        out = lanczos_resize(block, 7)
        assert np.abs(out - block).max() <= 1e-6

    def test_constant_preserved(self):
        out = lanczos_resize(np.full((5, 5), 3.25), 9)
        assert np.abs(out - 3.25).max() <= 1e-12

    def test_two_by_two_matches_oracle(self):
        block = [[0.0, 1.0], [1.0, 0.0]]
        out = lanczos_resize(np.array(block), 4)
        oracle = lanczos_oracle(block, 4)
        assert np.abs(out - oracle).max() <= 1e-6
        # frozen oracle values (direct kernel summation)
        assert out[0, 0] == pytest.approx(-0.22760964, abs=1e-6)
        assert out[1, 1] == pytest.approx(0.33225392, abs=1e-6)
        assert out[1, 2] == pytest.approx(0.66774608, abs=1e-6)

    def test_downscale_matches_oracle(self):
        rng = np.random.default_rng(17)
        block = rng.standard_normal((11, 11))
        out = lanczos_resize(block, 5)
        oracle = lanczos_oracle(block.tolist(), 5)
        assert np.abs(out - oracle).max() <= 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal((9, 9))
        y = rng.standard_normal((9, 9))
        a, b = 1.7, -0.4
        lhs = lanczos_resize(a * x + b * y, 6)
        rhs = a * lanczos_resize(x, 6) + b * lanczos_resize(y, 6)
        assert np.abs(lhs - rhs).max() <= 1e-6


def _toy_matrices(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    seq = make_sequence(rng.standard_normal((n, 4)).astype(np.float32))
    m = build_distance_matrix(seq)
    segments = SegmentAnnotation([(n // 4, n // 2)])
    a = build_annotation_matrix(n, segments)
    return m, a


class TestSubBlocks:
    def test_sizes_and_bounds(self):
        m, a = _toy_matrices(300)
        cfg = SamplerConfig(size_min=100, size_max=200, stride=25, canonical=20)
        blocks = sample_training_subblocks(m, a, cfg, np.random.default_rng(0))
        assert len(blocks) == 12
        for blk in blocks:
            assert 100 <= blk.size <= 200
            assert blk.input.shape == (blk.size, blk.size)
            assert blk.resized_input.shape == (20, 20)

    def test_small_matrix_single_block(self):
        m, a = _toy_matrices(80)
        cfg = SamplerConfig(size_min=100, size_max=200, stride=25, canonical=16)
        blocks = sample_training_subblocks(m, a, cfg, np.random.default_rng(0))
        assert len(blocks) == 1
        assert blocks[0].size == 80
        assert np.array_equal(blocks[0].input, m.values)
        assert blocks[0].resized_input.shape == (16, 16)

    def test_deterministic_given_rng(self):
        m, a = _toy_matrices(150)
        cfg = SamplerConfig(size_min=40, size_max=90, stride=30, canonical=16)
        b1 = sample_training_subblocks(m, a, cfg, np.random.default_rng(5))
        b2 = sample_training_subblocks(m, a, cfg, np.random.default_rng(5))
        assert len(b1) == len(b2)
        for x, y in zip(b1, b2):
            assert x.size == y.size and x.center == y.center
            assert np.array_equal(x.resized_input, y.resized_input)

    def test_target_equals_annotation_crop(self):
        m, a = _toy_matrices(150, seed=2)
        cfg = SamplerConfig(size_min=40, size_max=90, stride=30, canonical=16)
        for blk in sample_training_subblocks(m, a, cfg, np.random.default_rng(1)):
            start = min(max(blk.center - blk.size // 2, 0), m.n - blk.size)
            crop = a.values[start : start + blk.size, start : start + blk.size]
            assert np.array_equal(blk.target, crop)
            assert set(np.unique(blk.resized_target)) <= {0.0, 1.0}

    def test_normalized_input_range(self):
        m, a = _toy_matrices(150, seed=3)
        cfg = SamplerConfig(size_min=40, size_max=90, stride=30, canonical=16)
        for blk in sample_training_subblocks(m, a, cfg, np.random.default_rng(2)):
            assert blk.resized_input.min() >= 0.0
            assert blk.resized_input.max() <= 1.0

    def test_tiny_matrix_rejected(self):
        m, a = _toy_matrices(2)
        m.n = a.n = 1
        m.values = m.values[:1, :1]
        a.values = a.values[:1, :1]
        with pytest.raises(ShapeError):
            sample_training_subblocks(m, a, SamplerConfig(), np.random.default_rng(0))


def test_zero_noise_period_gives_exact_zero_distance():
    from reploc.embeddings import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(
        dim=6,
        segment_plan=[("repetitive", 48)],
        period_range=(12, 12),
        noise_sigma=0.0,
        seed=9,
    )
    seq, _ = generate_synthetic(spec)
    m = build_distance_matrix(seq)
    for t in range(48 - 12):
        assert m.values[t, t + 12] == 0.0


def test_normalize_block_constant_is_zero():
    assert not normalize_block(np.full((4, 4), 2.0)).any()


def test_write_pgm(tmp_path):
    m, _ = _toy_matrices(12)
    path = tmp_path / "m.pgm"
    write_pgm(m.values, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n12 12\n255\n")
    assert len(raw) == len(b"P5\n12 12\n255\n") + 144
