"""Command-line pipeline: synth, train, predict, eval, render.

Every command resolves its configuration from flags (defaults match the
training recipe used throughout), runs deterministically for a given
--seed, and drops a JSON run manifest next to its outputs.

Exit codes: 0 success, 2 usage/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .distmat import SamplerConfig, build_annotation_matrix, build_distance_matrix
from .embeddings import (
    SegmentAnnotation,
    SyntheticSpec,
    generate_synthetic,
    load_annotation,
    load_embeddings,
    save_annotation,
    save_embeddings,
)
from .errors import ConfigError, FormatError, NumericError, ToolkitError
from .images import render_overview, write_ppm
from .inference import InferConfig, extract_segments, predict_frames
from .metrics import EvalReport, aggregate, evaluate, evaluate_labels
from .model import Model, NetConfig, TrainConfig, load_model, save_model, train


def write_manifest(
    directory: Path,
    command: str,
    config: dict,
    seed,
    inputs: list[str],
    outputs: list[str],
    started: float,
) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": round(time.time() - started, 3),
    }
    path = directory / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# synth


_SYNTH_KEYS = {
    "videos": int,
    "dim": int,
    "seed": int,
    "amplitude": float,
    "noise_sigma": float,
    "period_min": int,
    "period_max": int,
    "rep_segments_min": int,
    "rep_segments_max": int,
    "rep_len_min": int,
    "rep_len_max": int,
    "nonrep_len_min": int,
    "nonrep_len_max": int,
    "frames_min": int,
    "frames_max": int,
}

_SYNTH_DEFAULTS = {
    "videos": 5,
    "dim": 16,
    "seed": 0,
    "amplitude": 1.0,
    "noise_sigma": 0.3,
    "period_min": 8,
    "period_max": 40,
    "rep_segments_min": 2,
    "rep_segments_max": 4,
    "rep_len_min": 60,
    "rep_len_max": 220,
    "nonrep_len_min": 20,
    "nonrep_len_max": 180,
    "frames_min": 600,
    "frames_max": 1200,
}


def parse_synth_spec(path: Path) -> dict:
    values = dict(_SYNTH_DEFAULTS)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = text.partition("=")
        key = key.strip()
        if key not in _SYNTH_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _SYNTH_KEYS[key](raw.strip())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad value for {key!r}") from None
    return values


def plan_video(cfg: dict, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Alternating non-repetitive / repetitive plan hitting a target length.

    Repetitive lengths are drawn from their configured range (scaled down
    if they would not fit); the remainder is split across the fillers,
    shaped by the non-repetitive length bounds, with the final filler
    absorbing rounding.
    """
    target = int(rng.integers(cfg["frames_min"], cfg["frames_max"] + 1))
    n_rep = int(rng.integers(cfg["rep_segments_min"], cfg["rep_segments_max"] + 1))
    rep_lens = rng.integers(cfg["rep_len_min"], cfg["rep_len_max"] + 1, size=n_rep)
    filler_min = max(1, cfg["nonrep_len_min"])
    budget = target - filler_min * (n_rep + 1)
    if budget < n_rep * cfg["period_max"]:
        raise ConfigError(
            f"frames_max {cfg['frames_max']} too small for {n_rep} repetitive segments"
        )
    if rep_lens.sum() > budget:
        rep_lens = np.maximum(
            (rep_lens * (budget / rep_lens.sum())).astype(int), cfg["period_max"]
        )
    remaining = target - int(rep_lens.sum())
    weights = rng.random(n_rep + 1) + 0.2
    filler = (remaining * weights / weights.sum()).astype(int)
    filler = np.clip(filler, filler_min, cfg["nonrep_len_max"])
    filler[-1] += remaining - int(filler.sum())
    if filler[-1] < 1:
        filler[-1] = 1
    plan: list[tuple[str, int]] = []
    for i in range(n_rep):
        plan.append(("non-repetitive", int(filler[i])))
        plan.append(("repetitive", int(rep_lens[i])))
    plan.append(("non-repetitive", int(filler[-1])))
    return plan


def synth_videos(cfg: dict, out_dir: Path) -> list[str]:
    rng = np.random.default_rng(cfg["seed"])
    outputs = []
    for v in range(cfg["videos"]):
        plan = plan_video(cfg, rng)
        spec = SyntheticSpec(
            dim=cfg["dim"],
            segment_plan=plan,
            period_range=(cfg["period_min"], cfg["period_max"]),
            amplitude=cfg["amplitude"],
            noise_sigma=cfg["noise_sigma"],
            seed=int(rng.integers(0, 2**62)),
        )
        seq, ann = generate_synthetic(spec)
        stem = f"video_{v:03d}"
        save_embeddings(seq, out_dir / f"{stem}.remb")
        save_annotation(ann, out_dir / f"{stem}.segments.txt")
        outputs += [f"{stem}.remb", f"{stem}.segments.txt"]
    return outputs


def cmd_synth(args) -> int:
    started = time.time()
    spec_path = Path(args.spec)
    cfg = parse_synth_spec(spec_path)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = synth_videos(cfg, out_dir)
    write_manifest(out_dir, "synth", cfg, cfg["seed"], [str(spec_path)], outputs, started)
    print(f"wrote {len(outputs) // 2} videos to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def find_pairs(data_dir: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for remb in sorted(data_dir.glob("*.remb")):
        ann = remb.parent / (remb.stem + ".segments.txt")
        if ann.exists():
            pairs.append((remb, ann))
    return pairs


def net_config_from_args(args) -> NetConfig:
    weights = None
    if args.stage_weights:
        weights = tuple(float(w) for w in args.stage_weights.split(","))
    return NetConfig(
        stages=args.stages,
        first_filter=args.filter_size,
        channels=args.channels,
        skip_connections=not args.no_skip,
        intermediate_supervision=not args.no_intermediate,
        stage_weights=weights,
        canonical=args.canonical,
    )


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    pairs = find_pairs(data_dir)
    if not pairs:
        raise ConfigError(f"no .remb/.segments.txt pairs found in {data_dir}")
    dataset = []
    for remb, annp in pairs:
        seq = load_embeddings(remb)
        ann = load_annotation(annp)
        m = build_distance_matrix(seq)
        a = build_annotation_matrix(seq.n_frames, ann)
        dataset.append((m, a))
    net_cfg = net_config_from_args(args)
    net_cfg.validate()
    tcfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        sampler=SamplerConfig(
            size_min=args.block_min,
            size_max=args.block_max,
            stride=args.stride,
            canonical=args.canonical,
        ),
    )
    model = Model(net_cfg, seed=args.seed)
    result = train(model, dataset, tcfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    trace_path = out.parent / (out.name + ".losses.txt")
    with open(trace_path, "w") as fh:
        for i, loss in enumerate(result.epoch_losses):
            fh.write(f"epoch {i} {loss:.6f}\n")
        for i, loss in enumerate(result.step_losses):
            fh.write(f"step {i} {loss:.6f}\n")
    for i, loss in enumerate(result.epoch_losses):
        print(f"epoch {i}: loss {loss:.6f}")
    config = {
        "net": json.loads(json.dumps(net_cfg.__dict__)),
        "epochs": args.epochs,
        "lr": args.lr,
        "batch": args.batch,
        "block_min": args.block_min,
        "block_max": args.block_max,
        "stride": args.stride,
    }
    write_manifest(
        out.parent, "train", config, args.seed,
        [str(p) for pair in pairs for p in pair],
        [out.name, trace_path.name], started,
    )
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    started = time.time()
    model = load_model(args.checkpoint)
    if args.canonical is not None and args.canonical != model.cfg.canonical:
        raise ConfigError(
            f"requested canonical {args.canonical} != checkpoint canonical "
            f"{model.cfg.canonical}"
        )
    seq = load_embeddings(args.embeddings)
    if seq.n_frames < 2:
        raise ConfigError("need at least 2 frames to predict")
    m = build_distance_matrix(seq)
    infer = InferConfig(
        window=args.window,
        stride=args.stride,
        threshold=args.threshold,
        score_rule=args.score_rule,
    )
    scores = predict_frames(model, infer, m)
    segments = extract_segments(scores, min_len=args.min_seg_len)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.embeddings).stem
    scores_path = out_dir / f"{stem}.scores.txt"
    with open(scores_path, "w") as fh:
        for i in range(scores.n):
            fh.write(f"{i} {scores.scores[i]:.6f} {int(scores.labels[i])}\n")
    seg_path = out_dir / f"{stem}.pred-segments.txt"
    save_annotation(segments, seg_path)
    config = {
        "window": args.window,
        "stride": args.stride,
        "threshold": args.threshold,
        "score_rule": args.score_rule,
        "min_seg_len": args.min_seg_len,
    }
    write_manifest(
        out_dir, "predict", config, args.seed,
        [args.checkpoint, args.embeddings],
        [scores_path.name, seg_path.name], started,
    )
    print(f"wrote {scores_path} and {seg_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def load_scores_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an 'index P_f label' score file into (scores, labels)."""
    scores, labels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'index score label'")
        try:
            idx, score, label = int(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed score line") from None
        if idx != len(scores):
            raise FormatError(f"{path}:{lineno}: non-consecutive frame index {idx}")
        scores.append(score)
        labels.append(bool(label))
    return np.array(scores), np.array(labels, dtype=bool)


def pred_labels_from_file(path: Path, n: int | None) -> tuple[np.ndarray, int]:
    """Load predictions from a scores file or a segments file."""
    if path.name.endswith(".scores.txt"):
        _, labels = load_scores_file(path)
        if n is not None and n != labels.size:
            raise ConfigError(f"--frames {n} != {labels.size} lines in {path}")
        return labels, labels.size
    ann = load_annotation(path)
    if n is None:
        raise ConfigError("--frames is required when predictions are a segments file")
    return ann.frame_labels(n), n


def report_lines(report: EvalReport) -> list[str]:
    return [
        f"R {100 * report.recall:.1f} P {100 * report.precision:.1f} "
        f"F1 {100 * report.f1:.1f} O {100 * report.overlap:.1f}",
        f"counts tp {report.tp} fp {report.fp} fn {report.fn} tn {report.tn}",
        "R\tP\tF1\tO\ttp\tfp\tfn\ttn",
        report.tsv(),
    ]


def cmd_eval(args) -> int:
    started = time.time()
    if args.pred_dir:
        pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
        reports = []
        names = []
        for scores_file in sorted(pred_dir.glob("*.scores.txt")):
            stem = scores_file.name.removesuffix(".scores.txt")
            gt_file = gt_dir / f"{stem}.segments.txt"
            if not gt_file.exists():
                raise ConfigError(f"missing ground truth {gt_file}")
            labels, n = pred_labels_from_file(scores_file, None)
            reports.append(evaluate(labels, load_annotation(gt_file), n))
            names.append(stem)
        if not reports:
            raise ConfigError(f"no *.scores.txt files in {pred_dir}")
        for name, rep in zip(names, reports):
            print(f"{name}\t{rep.tsv()}")
        mean = aggregate(reports)
        print("macro average over", len(reports), "videos")
        for line in report_lines(mean):
            print(line)
        stds = {
            "R": float(np.std([r.recall for r in reports])),
            "P": float(np.std([r.precision for r in reports])),
            "F1": float(np.std([r.f1 for r in reports])),
            "O": float(np.std([r.overlap for r in reports])),
        }
        print(
            "stddev "
            + " ".join(f"{k} {100 * v:.1f}" for k, v in stds.items())
        )
        write_manifest(
            pred_dir, "eval", {"mode": "directory"}, args.seed,
            [str(pred_dir), str(gt_dir)], [], started,
        )
        return 0
    labels, n = pred_labels_from_file(Path(args.pred), args.frames)
    gt = load_annotation(args.gt)
    report = evaluate(labels, gt, n)
    for line in report_lines(report):
        print(line)
    write_manifest(
        Path(args.pred).parent, "eval", {"frames": n}, args.seed,
        [str(args.pred), str(args.gt)], [], started,
    )
    return 0


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    started = time.time()
    seq = load_embeddings(args.embeddings)
    m = build_distance_matrix(seq)
    pred_labels = None
    if args.scores:
        _, pred_labels = load_scores_file(Path(args.scores))
        if pred_labels.size != seq.n_frames:
            raise ConfigError(
                f"scores cover {pred_labels.size} frames, video has {seq.n_frames}"
            )
    gt_labels = None
    if args.gt:
        gt_labels = load_annotation(args.gt).frame_labels(seq.n_frames)
    rgb = render_overview(m.values, pred_labels, gt_labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(rgb, out)
    write_manifest(
        out.parent, "render", {}, args.seed,
        [args.embeddings] + [p for p in (args.scores, args.gt) if p],
        [out.name], started,
    )
    print(f"wrote {out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reploc",
        description="Localize repetitive activity segments in embedded videos.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled synthetic videos")
    p.add_argument("spec", help="key=value spec file")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a directory of videos")
    p.add_argument("--data", required=True, help="directory of .remb/.segments.txt pairs")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--filter-size", type=int, default=5)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--no-skip", action="store_true", help="disable skip connections")
    p.add_argument(
        "--no-intermediate", action="store_true", help="supervise only the last stage"
    )
    p.add_argument("--stage-weights", default=None, help="comma-separated class weights")
    p.add_argument("--block-min", type=int, default=100)
    p.add_argument("--block-max", type=int, default=200)
    p.add_argument("--stride", type=int, default=25, help="sub-block sampling stride")
    p.add_argument("--canonical", type=int, default=140)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score every frame of a video")
    p.add_argument("checkpoint")
    p.add_argument("embeddings")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=140)
    p.add_argument("--stride", type=int, default=35, help="window stride")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-seg-len", type=int, default=1)
    p.add_argument("--score-rule", choices=("diagonal", "row-mean"), default="diagonal")
    p.add_argument("--canonical", type=int, default=None,
                   help="assert the checkpoint's canonical size")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", help="scores file or segments file")
    p.add_argument("--gt", help="ground-truth segments file")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--pred-dir", help="directory of *.scores.txt files")
    p.add_argument("--gt-dir", help="directory of *.segments.txt ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="distance matrix image with label bars")
    p.add_argument("embeddings")
    p.add_argument("--scores", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval":
        if bool(args.pred_dir) != bool(args.gt_dir):
            parser.error("--pred-dir and --gt-dir must be given together")
        if not args.pred_dir and not (args.pred and args.gt):
            parser.error("need --pred and --gt (or --pred-dir and --gt-dir)")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ToolkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
