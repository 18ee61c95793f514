"""Variable-rate hierarchical-VAE image codec with bound-guided training."""

from .config import ArchConfig, TrainConfig, toy_arch
from .entropy import Bitstream
from .metrics import EvalReport, RdCurve, bdrate, psnr
from .model import BgVae, CodecOutput, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "TrainConfig",
    "toy_arch",
    "Bitstream",
    "EvalReport",
    "RdCurve",
    "bdrate",
    "psnr",
    "BgVae",
    "CodecOutput",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
