import numpy as np
import pytest

from reploc.distmat import DistanceMatrix, build_distance_matrix, lanczos_resize, normalize_block
from reploc.embeddings import SegmentAnnotation, make_sequence
from reploc.errors import ConfigError, ShapeError
from reploc.inference import (
    FrameScores,
    InferConfig,
    extract_segments,
    predict_frames,
    threshold_labels,
    window_starts,
)


class StubModel:
    """Deterministic stand-in: elementwise squashing of the input block."""

    class _Cfg:
        def __init__(self, canonical):
            self.canonical = canonical

    def __init__(self, canonical=16):
        self.cfg = self._Cfg(canonical)
        self.calls = 0

    def forward(self, x, train=False):
        self.calls += 1
        return [1.0 / (1.0 + np.exp(-(x - 0.5)))]


class ConstantModel(StubModel):
    """Returns a fixed constant per window, in call order."""

    def __init__(self, canonical, per_window):
        super().__init__(canonical)
        self.per_window = list(per_window)
        self.served = 0

    def forward(self, x, train=False):
        out = np.empty_like(x)
        for b in range(x.shape[0]):
            out[b] = self.per_window[self.served]
            self.served += 1
        return [out]


def toy_matrix(n, seed=0):
    rng = np.random.default_rng(seed)
    return build_distance_matrix(make_sequence(rng.standard_normal((n, 5)).astype(np.float32)))


class TestWindowStarts:
    @pytest.mark.parametrize(
        "n,window,stride", [(100, 30, 10), (100, 30, 30), (100, 100, 10), (37, 16, 7), (50, 64, 16)]
    )
    def test_full_coverage(self, n, window, stride):
        w = min(window, n)
        covered = np.zeros(n, dtype=bool)
        for s in window_starts(n, w, stride):
            assert 0 <= s <= n - w
            covered[s : s + w] = True
        assert covered.all()

    def test_stride_equals_window_tiles(self):
        starts = window_starts(90, 30, 30)
        assert starts == [0, 30, 60]


class TestPredictFrames:
    def test_matches_exhaustive_oracle_exactly(self):
        m = toy_matrix(60, seed=1)
        model = StubModel(canonical=16)
        infer = InferConfig(window=24, stride=10, batch_size=3)
        scores = predict_frames(model, infer, m)

        # oracle: enumerate every (window, frame, score) triple in window order
        sums = np.zeros(60)
        counts = np.zeros(60, dtype=int)
        for s in window_starts(60, 24, 10):
            block = m.values[s : s + 24, s : s + 24]
            resized = normalize_block(lanczos_resize(block, 16)).astype(np.float32)
            pred = model.forward(resized[None, None])[0][0, 0]
            back = np.clip(lanczos_resize(pred, 24), 0.0, 1.0)
            diag = np.diagonal(back)
            sums[s : s + 24] += diag
            counts[s : s + 24] += 1
        expected = sums / counts
        assert np.array_equal(scores.scores, expected)
        assert np.array_equal(scores.counts, counts)
        assert counts.min() >= 1

    def test_mean_of_two_windows(self):
        # frame covered by windows scoring 0.4 and 0.8 -> 0.6 -> repetitive
        n = 8
        m = DistanceMatrix(n, np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float))
        model = ConstantModel(canonical=4, per_window=[0.4, 0.8])
        infer = InferConfig(window=8, stride=4, batch_size=1)
        # two identical whole-range windows: slide over n=8 with window 8 -> 1 window;
        # use window 6 stride 2 instead: starts 0 and 2
        infer = InferConfig(window=6, stride=2, batch_size=1)
        scores = predict_frames(model, infer, m)
        overlap = slice(2, 6)
        assert np.allclose(scores.scores[overlap], 0.6)
        assert scores.labels[overlap].all()

    def test_exact_threshold_not_repetitive(self):
        n = 12
        m = toy_matrix(n, seed=2)
        model = ConstantModel(canonical=4, per_window=[0.5] * 10)
        infer = InferConfig(window=8, stride=4, batch_size=2, threshold=0.5)
        scores = predict_frames(model, infer, m)
        assert np.allclose(scores.scores, 0.5)
        assert not scores.labels.any()

    def test_threshold_monotonicity(self):
        m = toy_matrix(40, seed=3)
        model = StubModel(canonical=16)
        low = predict_frames(model, InferConfig(window=16, stride=8, threshold=0.3), m)
        high = predict_frames(model, InferConfig(window=16, stride=8, threshold=0.7), m)
        assert (high.labels <= low.labels).all()

    def test_whole_matrix_window_when_short(self):
        m = toy_matrix(10, seed=4)
        model = StubModel(canonical=8)
        scores = predict_frames(model, InferConfig(window=64, stride=16), m)
        assert (scores.counts == 1).all()

    def test_too_few_frames(self):
        m = DistanceMatrix(1, np.zeros((1, 1)))
        with pytest.raises(ShapeError):
            predict_frames(StubModel(), InferConfig(), m)

    def test_row_mean_rule(self):
        m = toy_matrix(30, seed=5)
        model = StubModel(canonical=16)
        d = predict_frames(model, InferConfig(window=16, stride=8, score_rule="diagonal"), m)
        r = predict_frames(model, InferConfig(window=16, stride=8, score_rule="row-mean"), m)
        assert d.scores.shape == r.scores.shape
        assert not np.array_equal(d.scores, r.scores)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            InferConfig(stride=0).validate()
        with pytest.raises(ConfigError):
            InferConfig(threshold=1.0).validate()


class TestThreshold:
    def test_strict_inequality(self):
        labels = threshold_labels(np.array([0.499, 0.5, 0.501]), 0.5)
        assert labels.tolist() == [False, False, True]


class TestExtractSegments:
    def _scores(self, bits):
        labels = np.array([bool(int(b)) for b in bits])
        return FrameScores(
            n=len(labels),
            scores=labels.astype(float),
            counts=np.ones(len(labels), dtype=int),
            labels=labels,
        )

    def test_basic_runs(self):
        segs = extract_segments(self._scores("0011101"))
        assert segs.segments == [(2, 4), (6, 6)]

    def test_min_len_filter(self):
        segs = extract_segments(self._scores("0011101"), min_len=2)
        assert segs.segments == [(2, 4)]

    def test_all_zero(self):
        assert extract_segments(self._scores("00000")).segments == []

    def test_all_one(self):
        assert extract_segments(self._scores("1111")).segments == [(0, 3)]

    def test_round_trip_through_labels(self):
        ann = SegmentAnnotation([(2, 5), (9, 9), (12, 19)])
        labels = ann.frame_labels(25)
        scores = FrameScores(25, labels.astype(float), np.ones(25, dtype=int), labels)
        assert extract_segments(scores, min_len=1).segments == ann.segments
