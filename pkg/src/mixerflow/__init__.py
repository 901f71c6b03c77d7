"""MixerFlow: MLP-Mixer style normalizing flows on a small numpy autograd."""
from .config import RunConfig, load_config
from .errors import (ConditioningError, ConfigError, ContractError, DimensionError, DomainError,
                     FormatError, GeometryError, GraphError, InitializationError, MixerFlowError,
                     NumericError)
from .flows import bits_per_dim, log_likelihood, sample, verify_bijection
from .model import FlowModel, MixerFlowConfig, build_model, hybrid_train_head
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "RunConfig", "load_config", "MixerFlowConfig", "FlowModel", "build_model", "hybrid_train_head",
    "Tensor", "Parameter", "backward", "no_grad", "bits_per_dim", "log_likelihood", "sample",
    "verify_bijection", "MixerFlowError", "ContractError", "DimensionError", "DomainError",
    "NumericError", "ConditioningError", "GraphError", "InitializationError", "GeometryError",
    "ConfigError", "FormatError",
]
