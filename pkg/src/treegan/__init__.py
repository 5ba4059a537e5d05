"""TreeGCN point-cloud GAN: generator, WGAN-GP training and evaluation metrics."""

from .core_math import Adam, Parameter, Tensor, backward, grad, grad_check
from .critic import Critic, CriticConfig
from .data import PointCloud, sample_shape
from .metrics import GaussianStats, chamfer, emd_approx, fpd
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from .treegcn import Generator, GeneratorConfig, generate

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Parameter",
    "Tensor",
    "backward",
    "grad",
    "grad_check",
    "Critic",
    "CriticConfig",
    "PointCloud",
    "sample_shape",
    "GaussianStats",
    "chamfer",
    "emd_approx",
    "fpd",
    "TrainConfig",
    "Trainer",
    "load_checkpoint",
    "save_checkpoint",
    "Generator",
    "GeneratorConfig",
    "generate",
]
