"""Attribute-guided VQA with graph fusion and contrastive knowledge distillation."""

from .config import TrainConfig, desk_config, load_config, parse_config
from .data import (
    AnswerVocabulary,
    DatasetManifest,
    FixtureConfig,
    SampleRecord,
    encode_answer_targets,
    generate_synthetic_fixture,
    load_manifest,
)
from .distill import KnowledgeDistillation, contrastive_loss
from .fusion import AttributeFusion, fuse
from .head import AnswerHead, predict, total_loss, vqa_loss
from .model import OAMVQA, collate
from .primitives import grad_check
from .training import Checkpoint, MetricsReport, evaluate, run_ablation_suite, train
from .verify import full_pipeline_grad_check

__version__ = "0.1.0"

__all__ = [
    "AnswerHead",
    "AnswerVocabulary",
    "AttributeFusion",
    "Checkpoint",
    "DatasetManifest",
    "FixtureConfig",
    "KnowledgeDistillation",
    "MetricsReport",
    "OAMVQA",
    "SampleRecord",
    "TrainConfig",
    "collate",
    "contrastive_loss",
    "desk_config",
    "encode_answer_targets",
    "evaluate",
    "full_pipeline_grad_check",
    "fuse",
    "generate_synthetic_fixture",
    "grad_check",
    "load_config",
    "load_manifest",
    "parse_config",
    "predict",
    "run_ablation_suite",
    "total_loss",
    "train",
    "vqa_loss",
]
