"""Attention-augmented DeepConvLSTM for wearable-sensor activity recognition."""

__version__ = "0.1.0"

from .attention import AttentionTrace, TemporalAttention
from .data import FrameBatch, TimeSeriesDataset, extract_frames, load_csv
from .evaluation import EvalReport, macro_f1, samplewise_predict, wilson_interval
from .model import HarModel, ModelConfig, cross_entropy
from .ndcore import Rng, shuffle_indices

__all__ = [
    "AttentionTrace", "TemporalAttention", "FrameBatch", "TimeSeriesDataset", "extract_frames",
    "load_csv", "EvalReport", "macro_f1", "samplewise_predict", "wilson_interval", "HarModel",
    "ModelConfig", "cross_entropy", "Rng", "shuffle_indices",
]
