"""Run a pretrained image CNN over video frames and dump REMB embeddings.

One embedding row per (subsampled) frame: the activation of a chosen
layer of the VGG19 feature stack, reduced to a vector by global average
pooling (or flattened).  The output file uses the REMB binary format:

    magic "REMB" | u32 version=1 | u32 n_frames | u32 dim
    | n_frames*dim little-endian f32 row-major | trailing f32 fps

Weights come from torchvision's download cache (--weights download), a
local state-dict file (--weights PATH), or a seeded random
initialization (--weights random:SEED) for offline smoke tests.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torchvision

REMB_MAGIC = b"REMB"
REMB_VERSION = 1

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
INPUT_SIZE = 224

WEIGHTS_HINT = (
    "pretrained weights are not available; pass --weights PATH to a local "
    "vgg19 state dict, or download one first, e.g. from "
    "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth"
)


class ExtractorError(Exception):
    """Input or configuration problem; maps to exit code 2."""


@dataclass
class ExtractorConfig:
    video: str
    out: str
    layer: int = 15          # module index into the VGG19 feature stack
    pool: str = "avg"        # avg | flatten
    subsample: int = 1
    weights: str = "download"
    batch: int = 8

    def validate(self) -> None:
        if self.subsample < 1:
            raise ExtractorError("subsample must be >= 1")
        if self.pool not in ("avg", "flatten"):
            raise ExtractorError(f"unknown pooling {self.pool!r}")
        if self.batch < 1:
            raise ExtractorError("batch must be >= 1")


def build_backbone(layer: int, weights: str) -> torch.nn.Module:
    """VGG19 feature stack truncated after the requested module."""
    if weights == "download":
        try:
            net = torchvision.models.vgg19(
                weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1
            )
        except Exception as exc:
            raise ExtractorError(f"{WEIGHTS_HINT} ({exc})") from None
    elif weights.startswith("random:"):
        try:
            seed = int(weights.split(":", 1)[1])
        except ValueError:
            raise ExtractorError(f"bad --weights value {weights!r}") from None
        torch.manual_seed(seed)
        net = torchvision.models.vgg19(weights=None)
    else:
        path = Path(weights)
        if not path.exists():
            raise ExtractorError(f"weights file {path} not found; {WEIGHTS_HINT}")
        net = torchvision.models.vgg19(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    if not 0 <= layer < len(net.features):
        raise ExtractorError(
            f"layer {layer} out of range 0..{len(net.features) - 1}"
        )
    backbone = torch.nn.Sequential(*list(net.features[: layer + 1]))
    backbone.eval()
    return backbone


def iter_frames(path: str, subsample: int):
    """Yield RGB frames; raises if the video cannot be decoded."""
    cap = cv2.VideoCapture(path)
    if not cap.isOpened():
        cap.release()
        raise ExtractorError(f"cannot open video {path}")
    index = 0
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            if index % subsample == 0:
                yield cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            index += 1
    finally:
        cap.release()


def video_fps(path: str) -> float | None:
    cap = cv2.VideoCapture(path)
    fps = cap.get(cv2.CAP_PROP_FPS)
    cap.release()
    return float(fps) if fps and fps > 0 else None


def preprocess(frames: list[np.ndarray]) -> torch.Tensor:
    batch = np.empty((len(frames), 3, INPUT_SIZE, INPUT_SIZE), dtype=np.float32)
    for i, frame in enumerate(frames):
        resized = cv2.resize(frame, (INPUT_SIZE, INPUT_SIZE), interpolation=cv2.INTER_AREA)
        scaled = (resized.astype(np.float32) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
        batch[i] = scaled.transpose(2, 0, 1)
    return torch.from_numpy(batch)


def reduce_activation(act: torch.Tensor, pool: str) -> np.ndarray:
    if pool == "avg":
        vec = act.mean(dim=(2, 3))
    else:
        vec = act.reshape(act.shape[0], -1)
    return vec.numpy().astype(np.float32)


def write_remb(rows: np.ndarray, fps: float | None, path: str) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ExtractorError(f"no frames extracted, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise ExtractorError("embeddings contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", REMB_MAGIC, REMB_VERSION, *rows.shape))
        fh.write(rows.tobytes())
        if fps is not None:
            fh.write(struct.pack("<f", fps))


def extract(cfg: ExtractorConfig) -> int:
    """Returns the number of embedded frames."""
    cfg.validate()
    backbone = build_backbone(cfg.layer, cfg.weights)
    rows: list[np.ndarray] = []
    pending: list[np.ndarray] = []

    def flush():
        if not pending:
            return
        with torch.no_grad():
            act = backbone(preprocess(pending))
        rows.append(reduce_activation(act, cfg.pool))
        pending.clear()

    for frame in iter_frames(cfg.video, cfg.subsample):
        pending.append(frame)
        if len(pending) == cfg.batch:
            flush()
    flush()
    if not rows:
        raise ExtractorError(f"video {cfg.video} contains no frames")
    data = np.concatenate(rows, axis=0)
    fps = video_fps(cfg.video)
    if fps is not None:
        fps /= cfg.subsample
    write_remb(data, fps, cfg.out)
    return data.shape[0]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="remb-extract",
        description="Dump per-frame CNN embeddings of a video in REMB format.",
    )
    parser.add_argument("--video", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--layer", type=int, default=15,
                        help="feature-stack module index (default 15)")
    parser.add_argument("--pool", choices=("avg", "flatten"), default="avg")
    parser.add_argument("--subsample", type=int, default=1,
                        help="keep every K-th frame")
    parser.add_argument("--weights", default="download",
                        help="'download', a state-dict path, or random:SEED")
    parser.add_argument("--batch", type=int, default=8)
    args = parser.parse_args(argv)
    cfg = ExtractorConfig(
        video=args.video,
        out=args.out,
        layer=args.layer,
        pool=args.pool,
        subsample=args.subsample,
        weights=args.weights,
        batch=args.batch,
    )
    try:
        n = extract(cfg)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {n} embeddings to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
