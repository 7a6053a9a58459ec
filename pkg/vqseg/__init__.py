"""
vqseg
Semantic segmentation with a vector-quantised bottleneck, small enough to
train on a desktop CPU.

The network is a U-shaped convolution / transformer hybrid whose deepest
features are snapped to a learnable codebook; skip connections stay
continuous.
"""

__version__ = "0.1.0"
__author__ = "vqseg developers"

from .config import RunConfig, load_config
from .errors import ConfigurationError, DataError, InternalInvariantError, NumericalError, VQSegError
from .model import SegModel, build_model, forward, predict, profile_model
from .quantizer import VectorQuantizer, init_codebook, nearest_code, quantize_field, usage_stats, vq_backward
from .trainer import ablate_codebook, compare, evaluate, train

__all__ = [
    "RunConfig",
    "load_config",
    "VQSegError",
    "ConfigurationError",
    "DataError",
    "NumericalError",
    "InternalInvariantError",
    "SegModel",
    "build_model",
    "forward",
    "predict",
    "profile_model",
    "VectorQuantizer",
    "init_codebook",
    "nearest_code",
    "quantize_field",
    "usage_stats",
    "vq_backward",
    "train",
    "evaluate",
    "ablate_codebook",
    "compare",
]
