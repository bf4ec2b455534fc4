"""Federated learning over unreliable cellular uplinks."""

from .errors import ConfigError, ConvergenceError, DataFormatError, FedcellError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DataFormatError",
    "FedcellError",
    "NumericalError",
    "__version__",
]
