import subprocess
import sys

import cv2
import numpy as np
import pytest

from remb_extractor.extract import ExtractorConfig, ExtractorError, extract, main

# the primary toolkit is only used to verify the cross-component file contract
from reploc import build_distance_matrix, load_embeddings

RANDOM_WEIGHTS = "random:7"


def write_clip(path, n_frames=10, duplicates=(2, 7), size=64, fps=10.0):
    """MJPG clip with two bit-identical frames (intra-only codec keeps them equal)."""
    writer = cv2.VideoWriter(
        str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (size, size)
    )
    assert writer.isOpened()
    rng = np.random.default_rng(0)
    frames = []
    for i in range(n_frames):
        if i == duplicates[1]:
            frame = frames[duplicates[0]]
        else:
            noise = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
            frame = cv2.GaussianBlur(noise, (7, 7), 2)
        frames.append(frame)
        writer.write(frame)
    writer.release()
    return path


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    return write_clip(tmp_path_factory.mktemp("video") / "clip.avi")


@pytest.fixture(scope="module")
def extracted(clip, tmp_path_factory):
    out = tmp_path_factory.mktemp("emb") / "clip.remb"
    n = extract(ExtractorConfig(video=str(clip), out=str(out), weights=RANDOM_WEIGHTS))
    assert n == 10
    return out


class TestRoundTrip:
    def test_parses_with_primary_loader(self, extracted):
        seq = load_embeddings(extracted)
        assert seq.n_frames == 10
        assert seq.dim == 256  # layer 15 of the feature stack, average-pooled
        assert np.isfinite(seq.data).all()

    def test_fps_recorded(self, extracted):
        seq = load_embeddings(extracted)
        assert seq.fps == pytest.approx(10.0)

    def test_duplicated_frames_are_near_zero_distance(self, extracted):
        seq = load_embeddings(extracted)
        m = build_distance_matrix(seq)
        assert m.values[2, 7] < 1e-5
        others = [m.values[i, j] for i in range(10) for j in range(i + 1, 10)
                  if (i, j) != (2, 7)]
        assert min(others) > 1e-3  # distinct frames stay apart

    def test_constant_dim_across_frames(self, extracted):
        seq = load_embeddings(extracted)
        assert seq.data.shape == (10, 256)


class TestOptions:
    def test_subsample(self, clip, tmp_path):
        out = tmp_path / "sub.remb"
        n = extract(ExtractorConfig(video=str(clip), out=str(out),
                                    weights=RANDOM_WEIGHTS, subsample=2))
        assert n == 5
        seq = load_embeddings(out)
        assert seq.n_frames == 5
        assert seq.fps == pytest.approx(5.0)

    def test_flatten_pooling(self, clip, tmp_path):
        out = tmp_path / "flat.remb"
        extract(ExtractorConfig(video=str(clip), out=str(out),
                                weights=RANDOM_WEIGHTS, layer=30, pool="flatten"))
        seq = load_embeddings(out)
        assert seq.n_frames == 10
        assert seq.dim > 256

    def test_deterministic(self, clip, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.remb"
            extract(ExtractorConfig(video=str(clip), out=str(out), weights=RANDOM_WEIGHTS))
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_layer(self, clip, tmp_path):
        with pytest.raises(ExtractorError):
            extract(ExtractorConfig(video=str(clip), out=str(tmp_path / "x.remb"),
                                    weights=RANDOM_WEIGHTS, layer=99))


class TestCli:
    def test_unreadable_video_exits_two(self, tmp_path, capsys):
        code = main(["--video", str(tmp_path / "missing.avi"),
                     "--out", str(tmp_path / "x.remb"), "--weights", RANDOM_WEIGHTS])
        assert code == 2
        assert "cannot open" in capsys.readouterr().err

    def test_missing_weights_exits_two_with_hint(self, clip, tmp_path, capsys):
        code = main(["--video", str(clip), "--out", str(tmp_path / "x.remb"),
                     "--weights", str(tmp_path / "no-such-weights.pth")])
        assert code == 2
        assert "download" in capsys.readouterr().err

    def test_cli_module_invocation(self, clip, tmp_path):
        out = tmp_path / "cli.remb"
        result = subprocess.run(
            [sys.executable, "-m", "remb_extractor.extract",
             "--video", str(clip), "--out", str(out),
             "--weights", RANDOM_WEIGHTS, "--subsample", "5"],
            capture_output=True, text=True,
        )
        assert result.returncode == 0, result.stderr
        assert load_embeddings(out).n_frames == 2
