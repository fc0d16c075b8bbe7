"""Interest-augmented collaborative knowledge graph recommender."""
from .errors import CIKGError, ConfigError, DataError, LLMTransportError, NumericalError
from .trainer import TrainConfig, fit

__all__ = ["CIKGError", "ConfigError", "DataError", "LLMTransportError", "NumericalError", "TrainConfig", "fit"]
__version__ = "0.1.0"
