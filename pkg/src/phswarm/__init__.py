"""Distributed port-Hamiltonian attention policies for multi-robot control."""

from . import backend
from .errors import (
    ArtifactError,
    ConfigError,
    ContractError,
    DimensionError,
    IntegrationError,
    InvariantError,
    MatchingError,
    PhswarmError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "backend",
    "ArtifactError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "IntegrationError",
    "InvariantError",
    "MatchingError",
    "PhswarmError",
    "StateError",
    "__version__",
]
