"""Self-supervised two-stage video deraining on a from-scratch autodiff engine."""

from .dataset import FrameSequence, load_sequence, save_sequence
from .metrics import MetricReport, evaluate_sequences, psnr, ssim
from .models import SpatialDenoiser, TemporalDenoiser, derain_sequence
from .rain import RainParams, apply_rain, corrupt_sequence, gaussian_blur, synthesize_rain_layer
from .trainer import TrainConfig, TrainReport, poisson_corrupt, train_spatial, train_temporal

__version__ = "0.1.0"

__all__ = [
    "FrameSequence",
    "MetricReport",
    "RainParams",
    "SpatialDenoiser",
    "TemporalDenoiser",
    "TrainConfig",
    "TrainReport",
    "apply_rain",
    "corrupt_sequence",
    "derain_sequence",
    "evaluate_sequences",
    "gaussian_blur",
    "load_sequence",
    "poisson_corrupt",
    "psnr",
    "save_sequence",
    "ssim",
    "synthesize_rain_layer",
    "train_spatial",
    "train_temporal",
]
