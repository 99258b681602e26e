"""No-reference image quality assessment: CNN features, self-attention, relative ranking, self-consistency."""
from .backbone import Backbone, BackboneConfig, FeatureFusion
from .encoder import EncoderConfig, TransformerEncoder, positional_encoding
from .estimator import TReSRegressor, check_images, check_scores
from .losses import LossReport, LossWeights, compute_losses, quality_loss, relative_ranking_loss, \
    self_consistency_loss, total_loss
from .metrics import MetricReport, evaluate, fit_logistic, plcc, srocc, weighted_average
from .model import ModelConfig, ModelOutput, TReSModel
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, train_arrays

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "FeatureFusion", "EncoderConfig", "TransformerEncoder",
    "positional_encoding", "TReSRegressor", "check_images", "check_scores", "LossReport",
    "LossWeights", "compute_losses", "quality_loss", "relative_ranking_loss", "self_consistency_loss",
    "total_loss", "MetricReport", "evaluate", "fit_logistic", "plcc", "srocc", "weighted_average",
    "ModelConfig", "ModelOutput", "TReSModel", "TrainConfig", "load_checkpoint", "save_checkpoint",
    "train", "train_arrays",
]
