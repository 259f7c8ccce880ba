"""Post-LN transformers in numpy, with single-head reconstructions and Admin scaling."""

from .accounting import count_flops, count_params, flop_breakdown, param_breakdown
from .estimator import SequenceTransformer
from .initialization import AdminProfile, ConfigError, InitSpec, ProfilingError, admin_omegas, admin_profile, apply_admin
from .model import (
    InputError,
    ModelConfig,
    ReconstructionError,
    build,
    decoder_forward,
    encoder_forward,
    forward_logits,
    load_config,
    parse_shorthand,
    reconstruct,
    save_config,
)
from .rng import RngStream
from .tasks import ToyTask
from .tensor import Tensor, grad_check
from .train import AGGRESSIVE, RunRecord, TrainSettings, head_sweep, stability_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AGGRESSIVE",
    "AdminProfile",
    "ConfigError",
    "InitSpec",
    "InputError",
    "ModelConfig",
    "ProfilingError",
    "ReconstructionError",
    "RngStream",
    "RunRecord",
    "SequenceTransformer",
    "Tensor",
    "ToyTask",
    "TrainSettings",
    "admin_omegas",
    "admin_profile",
    "apply_admin",
    "build",
    "count_flops",
    "count_params",
    "decoder_forward",
    "encoder_forward",
    "flop_breakdown",
    "forward_logits",
    "grad_check",
    "head_sweep",
    "load_config",
    "param_breakdown",
    "parse_shorthand",
    "reconstruct",
    "save_config",
    "stability_sweep",
    "train",
]
