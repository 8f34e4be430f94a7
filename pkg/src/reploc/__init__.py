"""Repetition localization from per-frame embedding sequences.

Pipeline: embeddings -> pairwise distance matrix -> diagonal sub-block
classifier -> sliding-window frame scores -> repetitive segments.
"""

__version__ = "0.1.0"

from .distmat import (
    AnnotationMatrix,
    DistanceMatrix,
    SamplerConfig,
    SubBlock,
    build_annotation_matrix,
    build_distance_matrix,
    lanczos_resize,
    sample_training_subblocks,
)
from .embeddings import (
    FrameEmbeddingSequence,
    SegmentAnnotation,
    SyntheticSpec,
    generate_synthetic,
    load_annotation,
    load_embeddings,
    make_sequence,
    save_annotation,
    save_embeddings,
)
from .inference import FrameScores, InferConfig, extract_segments, predict_frames
from .metrics import EvalReport, aggregate, evaluate
from .model import (
    Model,
    NetConfig,
    TrainConfig,
    build_model,
    load_model,
    save_model,
    staged_loss,
    train,
)

__all__ = [
    "AnnotationMatrix",
    "DistanceMatrix",
    "EvalReport",
    "FrameEmbeddingSequence",
    "FrameScores",
    "InferConfig",
    "Model",
    "NetConfig",
    "SamplerConfig",
    "SegmentAnnotation",
    "SubBlock",
    "SyntheticSpec",
    "TrainConfig",
    "aggregate",
    "build_annotation_matrix",
    "build_distance_matrix",
    "build_model",
    "evaluate",
    "extract_segments",
    "generate_synthetic",
    "lanczos_resize",
    "load_annotation",
    "load_embeddings",
    "load_model",
    "make_sequence",
    "predict_frames",
    "sample_training_subblocks",
    "save_annotation",
    "save_embeddings",
    "save_model",
    "staged_loss",
    "train",
]
