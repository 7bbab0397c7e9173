"""Dense numeric kernel: MLPs, reverse-mode gradients, Adam, splittable RNG."""
from .backend import NAME as BACKEND
from .mlp import (
    ForwardCache,
    MlpSpec,
    NonFiniteError,
    ParamSet,
    ShapeError,
    init_params,
    mlp_backward,
    mlp_forward,
    zeros_like,
)
from .optim import AdamState, adam_step
from .rng import RngStream, rng_split, tag_of

__all__ = [
    "BACKEND", "ForwardCache", "MlpSpec", "NonFiniteError", "ParamSet", "ShapeError",
    "init_params", "mlp_backward", "mlp_forward", "zeros_like", "AdamState", "adam_step",
    "RngStream", "rng_split", "tag_of",
]
