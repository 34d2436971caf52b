"""Iris style features: recognition, robustness benchmarking and style-transfer obfuscation."""

from .backbone import Backbone, init_backbone, load_backbone
from .data import Sample, generate_synthetic_corpus, load_gaze_dataset, load_recognition_dataset
from .features import channel_stats, cnn_feature, extract_features, style_feature
from .imaging import IrisCrop, apply_variation, extract_iris, reinsert
from .recognition import ClassifierHead, TrainConfig, predict, train_classifier
from .transfer import TransferConfig, stylize_eye, transfer

__version__ = "0.1.0"

__all__ = [
    "Backbone", "init_backbone", "load_backbone", "Sample", "generate_synthetic_corpus",
    "load_gaze_dataset", "load_recognition_dataset", "channel_stats", "cnn_feature", "extract_features",
    "style_feature", "IrisCrop", "apply_variation", "extract_iris", "reinsert", "ClassifierHead",
    "TrainConfig", "predict", "train_classifier", "TransferConfig", "stylize_eye", "transfer",
]
