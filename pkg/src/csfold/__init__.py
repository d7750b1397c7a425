"""csfold: block-based compressive sensing with a learned sampling matrix
and an unrolled cross-attention reconstruction network, built on a small
tape-based autodiff kernel."""

from .autodiff import (
    Tape,
    Tensor,
    backward,
    default_dtype,
    precision,
    set_debug_checks,
    set_default_dtype,
)
from .config import RunConfig, build_model
from .errors import (
    ConfigurationError,
    ContractError,
    CsfoldError,
    DimensionError,
    ImageIOError,
    NumericalError,
)
from .model import ReconstructionModel, mse_loss, model_forward
from .sampling import SamplingOperator, adjoint, init_reconstruction, ratio_to_m, sample

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "default_dtype",
    "precision",
    "set_debug_checks",
    "set_default_dtype",
    "RunConfig",
    "build_model",
    "ReconstructionModel",
    "mse_loss",
    "model_forward",
    "SamplingOperator",
    "adjoint",
    "init_reconstruction",
    "ratio_to_m",
    "sample",
    "CsfoldError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "ImageIOError",
    "NumericalError",
    "__version__",
]
