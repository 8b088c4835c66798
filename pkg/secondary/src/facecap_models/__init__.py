"""Model-side companions to the facecap pipeline: extractors and trainer."""

from .extractors import ExtractorConfig, ExtractResult, extract, is_monochrome
from .trainer import TrainConfig, TrainResult, emit_config, read_config, train, write_config

__version__ = "0.1.0"

__all__ = [
    "ExtractorConfig",
    "ExtractResult",
    "TrainConfig",
    "TrainResult",
    "emit_config",
    "extract",
    "is_monochrome",
    "read_config",
    "train",
    "write_config",
]
