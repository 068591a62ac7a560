"""Hierarchical contrastive attention head for spoofed-speech detection."""

from .data import FeatureStack, Manifest, SyntheticSpec, generate_synthetic, parse_manifest, read_feature_file, write_feature_file
from .losses import LossConfig, contrastive_margin, cross_entropy, total_loss
from .metrics import ScoredSet, compute_eer, det_points
from .model import AttentionRecord, HierConParams, ModelConfig, forward, forward_batch, init_params
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
