"""WSDAN: word- and sentence-embedding dual-attention network for medical VQA."""

from .autodiff import Tape, Tensor, grad_check
from .config import TrainConfig, load_config, parse_config
from .data import SynthSpec, generate
from .model import WSDAN, ModelParams

__version__ = "0.1.0"

__all__ = [
    "WSDAN",
    "ModelParams",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "generate",
    "grad_check",
    "load_config",
    "parse_config",
]
