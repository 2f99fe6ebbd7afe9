"""Style codes at desk scale.

A 21-character string that carries an image style: a small attention
autoencoder compresses a style image to 20 quantised dims, and a residual
control module injects the decoded style into a frozen toy diffusion model.
"""

from .codec import decode_code, encode_code, validate_code
from .errors import (CheckpointError, ConfigError, DimensionError, FormatError, FrozenParameterError,
                     OracleError, StylecodesError, TrainingAborted, UsageError, ValidationError,
                     VersionMismatch)
from .model import StylecodesModel, load_model

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DimensionError", "FormatError", "FrozenParameterError",
    "OracleError", "StylecodesError", "StylecodesModel", "TrainingAborted", "UsageError",
    "ValidationError", "VersionMismatch", "decode_code", "encode_code", "load_model", "validate_code",
]
