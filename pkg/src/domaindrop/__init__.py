"""DomainDrop: discriminator-guided channel dropout for domain generalization."""
from .analysis import (ChannelStats, DivergenceReport, ProbeConfig, channel_sensitivity, cmmd_hat,
                       divergence_report, inter_domain_gap, layer_probe_accuracy)
from .config import TrainConfig
from .data import DataSpec, DomainDataset, generate, split_leave_one_out
from .drop import DomainDiscriminator, DropConfig, domaindrop_forward, wrs_mask
from .errors import CheckpointError, ConfigError, DataError, TrainingError
from .estimator import VARIANTS, DomainDropClassifier
from .losses import LossWeights, consistency_loss, total_loss

__version__ = "0.1.0"

__all__ = [
    "ChannelStats", "CheckpointError", "ConfigError", "DataError", "DataSpec", "DivergenceReport",
    "DomainDataset", "DomainDiscriminator", "DomainDropClassifier", "DropConfig", "LossWeights",
    "ProbeConfig", "TrainConfig", "TrainingError", "VARIANTS", "channel_sensitivity", "cmmd_hat",
    "consistency_loss", "divergence_report", "domaindrop_forward", "generate", "inter_domain_gap",
    "layer_probe_accuracy", "split_leave_one_out", "total_loss", "wrs_mask",
]
