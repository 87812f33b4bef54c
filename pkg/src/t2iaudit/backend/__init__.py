"""Model-backend abstraction: contract, synthetic test double, HTTP service and client."""

from .base import (
    Backend,
    BackendError,
    BackendInfo,
    Capabilities,
    GenerationResult,
    ProtocolError,
    TransportError,
)
from .client import RemoteBackend
from .synthetic import BiasSpec, SyntheticBackend, SyntheticModelSpec

__all__ = [
    "Backend",
    "BackendError",
    "BackendInfo",
    "Capabilities",
    "GenerationResult",
    "ProtocolError",
    "TransportError",
    "RemoteBackend",
    "BiasSpec",
    "SyntheticBackend",
    "SyntheticModelSpec",
]
