"""Hybrid Mamba-Transformer semi-dense image matcher in pure numpy."""

from .errors import (
    ArchiveError,
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    HybridMatchError,
    InvalidStatisticsError,
    NumericalError,
    PatternParseError,
)
from .matcher import MatchSet
from .model import PRESETS, Model, ModelConfig, StageTimings, build, load, parse_pattern, save

__version__ = "0.1.0"

__all__ = [
    "ArchiveError", "ConfigurationError", "ContractError", "DimensionError", "DomainError",
    "HybridMatchError", "InvalidStatisticsError", "MatchSet", "Model", "ModelConfig", "NumericalError",
    "PRESETS", "PatternParseError", "StageTimings", "build", "load", "parse_pattern", "save",
]
