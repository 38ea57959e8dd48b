"""Marginalization-consistent mixtures of separable flows for irregular time series."""

from .baselines import VARIANTS, VariantSpec, build_variant
from .model import ConditionalMixture, JointDensityResult, ModelConfig, MosesModel, load_model, save_model
from .series import TimeSeriesInstance, generate_blast, generate_circle, load_jsonl, split
from .trainer import TrainConfig, TrainReport, njnll_loss, train

__all__ = [
    "VARIANTS", "VariantSpec", "build_variant",
    "ConditionalMixture", "JointDensityResult", "ModelConfig", "MosesModel", "load_model", "save_model",
    "TimeSeriesInstance", "generate_blast", "generate_circle", "load_jsonl", "split",
    "TrainConfig", "TrainReport", "njnll_loss", "train",
]
