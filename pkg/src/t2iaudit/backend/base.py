"""Model-backend contract shared by the in-process and remote backends."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Optional

from ..core import EmbeddingMatrix, GenerationRequest, ImageFeature

__all__ = [
    "ERROR_CODES",
    "BackendError",
    "ProtocolError",
    "TransportError",
    "Capabilities",
    "BackendInfo",
    "GenerationResult",
    "Backend",
]

ERROR_CODES = ("BAD_DIMS", "UNSUPPORTED_CONDITIONING", "OVER_LENGTH", "INTERNAL")


class BackendError(Exception):
    """Base class for anything a backend call can raise."""


class ProtocolError(BackendError):
    """A request the backend rejected, tagged with a wire error code."""

    def __init__(self, code: str, detail: str):
        if code not in ERROR_CODES:
            raise ValueError(f"unknown error code {code!r}")
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class TransportError(BackendError):
    """The backend endpoint could not be reached or answered garbage."""


@dataclass(frozen=True)
class Capabilities:
    embedding_conditioning: bool = True
    prompt_conditioning: bool = True
    image_bytes: bool = False

    def to_json_dict(self) -> dict:
        return {
            "embedding_conditioning": self.embedding_conditioning,
            "prompt_conditioning": self.prompt_conditioning,
            "image_bytes": self.image_bytes,
        }


@dataclass(frozen=True)
class BackendInfo:
    """Identity and shape contract of a model backend."""

    model_id: str
    d: int
    d_v: int
    max_tokens: int
    feature_extractor_id: str
    capabilities: Capabilities = field(default_factory=Capabilities)

    def __post_init__(self) -> None:
        if self.d < 1 or self.d_v < 1:
            raise ValueError("d and d_v must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "d": self.d,
            "d_v": self.d_v,
            "max_tokens": self.max_tokens,
            "feature_extractor_id": self.feature_extractor_id,
            "capabilities": self.capabilities.to_json_dict(),
        }


@dataclass(frozen=True)
class GenerationResult:
    feature: ImageFeature
    image_bytes: Optional[bytes] = None


class Backend(abc.ABC):
    """A text-to-image model reachable through encode/generate/info.

    Implementations must be safe under concurrent calls and deterministic:
    equal inputs (including noise_seed) yield bit-equal outputs.
    """

    @abc.abstractmethod
    def info(self) -> BackendInfo: ...

    @abc.abstractmethod
    def encode(self, prompt: str) -> EmbeddingMatrix: ...

    @abc.abstractmethod
    def generate(self, req: GenerationRequest) -> GenerationResult: ...
