"""Shared domain types, run configuration and deterministic seed derivation."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "TokenInfo",
    "EmbeddingMatrix",
    "ImageFeature",
    "GenerationRequest",
    "Prompt",
    "SensitivityRecord",
    "ReliabilityDistribution",
    "AuditConfig",
    "derive_seed",
    "key64",
    "canonical_json",
    "sha256_hex",
]

_U64 = (1 << 64) - 1

CROSSING_RULES = ("mean", "min", "max")


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TokenInfo:
    """One token of an encoded prompt: surface form, backend id, special flag."""

    text: str
    token_id: int
    special: bool = False


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An n x d token-embedding matrix with per-row token alignment.

    Only occupied rows are stored; padding never appears here.
    """

    values: np.ndarray
    tokens: tuple[TokenInfo, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _as_readonly(self.values))
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.values.ndim != 2:
            raise ValueError(f"embedding must be 2-D, got shape {self.values.shape}")
        n, d = self.values.shape
        if n < 1 or d < 1:
            raise ValueError(f"embedding must be at least 1x1, got {n}x{d}")
        if len(self.tokens) != n:
            raise ValueError(f"{len(self.tokens)} tokens for {n} embedding rows")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite entries")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def non_special_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if not t.special]

    def with_values(self, values: np.ndarray) -> "EmbeddingMatrix":
        return EmbeddingMatrix(values=values, tokens=self.tokens)


@dataclass(frozen=True)
class ImageFeature:
    """Feature-space stand-in for a generated image.

    All similarity math runs on these; pixels never enter the harness.
    """

    values: np.ndarray
    source_seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _as_readonly(self.values))
        if self.values.ndim != 1:
            raise ValueError(f"feature must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature contains non-finite entries")
        if float(np.linalg.norm(self.values)) <= 1e-12:
            raise ValueError("feature norm is (near) zero")


@dataclass(frozen=True)
class GenerationRequest:
    """A single generation call: exactly one of embedding/prompt conditions it."""

    embedding: Optional[EmbeddingMatrix] = None
    prompt: Optional[str] = None
    guidance: float = 7.5
    steps: int = 50
    noise_seed: int = 0
    want_image: bool = False

    def __post_init__(self) -> None:
        if (self.embedding is None) == (self.prompt is None):
            raise ValueError("exactly one of embedding/prompt must be set")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class Prompt:
    """One corpus prompt, with its ground-truth trigger annotation if injected."""

    prompt_id: str
    text: str
    injected_trigger: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.prompt_id:
            raise ValueError("prompt_id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"prompt {self.prompt_id}: text is empty")


@dataclass(frozen=True)
class SensitivityRecord:
    """One sweep observation: the perturbation magnitude at threshold crossing.

    ``token_index is None`` marks a whole-prompt (global) sweep; otherwise the
    record belongs to one token row. Censored records carry the budget-limit
    magnitude instead of a crossing.
    """

    prompt_id: str
    token_index: Optional[int]
    token: Optional[str]
    phi: float
    step_index: int
    censored: bool
    similarity_at_cross: float

    def __post_init__(self) -> None:
        if self.phi <= 0:
            raise ValueError("phi must be > 0")
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")
        if (self.token_index is None) != (self.token is None):
            raise ValueError("token_index and token must be set together")
        if self.token_index is not None and self.token_index < 0:
            raise ValueError("token_index must be >= 0")

    @property
    def scope(self) -> str:
        return "global" if self.token_index is None else "local"

    def to_json_dict(self) -> dict:
        # Field order is part of the JSONL contract; keep it fixed.
        return {
            "prompt_id": self.prompt_id,
            "scope": self.scope,
            "token_index": self.token_index,
            "token": self.token,
            "phi": self.phi,
            "step_index": self.step_index,
            "censored": self.censored,
            "similarity_at_cross": self.similarity_at_cross,
        }


@dataclass(frozen=True)
class ReliabilityDistribution:
    """KDE over recorded crossing magnitudes, characterized by its peak."""

    samples: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    phi_mo: float
    mode: float
    censored_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", _as_readonly(self.samples))
        object.__setattr__(self, "grid", _as_readonly(self.grid))
        object.__setattr__(self, "density", _as_readonly(self.density))


_CONFIG_DEFAULTS = {
    "delta_p": 0.05,
    "tau": 0.9,
    "n_ptb": 3,
    "max_steps": 40,
    "guidance_main": 7.5,
    "guidance_low": 1.5,
    "steps_T": 50,
    "diversity_n": 10,
    "fairness_k": 5,
    "base_seed": 0,
    "trigger_rate": 0.10,
    "crossing_rule": "mean",
}


@dataclass(frozen=True)
class AuditConfig:
    """Knobs for a full audit run.

    ``crossing_rule`` picks how the per-step batch of cosines is reduced
    before the threshold test (mean is the default; min and max are stricter
    and looser alternatives).
    """

    delta_p: float = 0.05
    tau: float = 0.9
    n_ptb: int = 3
    max_steps: int = 40
    guidance_main: float = 7.5
    guidance_low: float = 1.5
    steps_T: int = 50
    diversity_n: int = 10
    fairness_k: int = 5
    base_seed: int = 0
    trigger_rate: float = 0.10
    crossing_rule: str = "mean"

    def __post_init__(self) -> None:
        if not (0 < self.delta_p <= 1):
            raise ValueError("delta_p must be in (0, 1]")
        if not (0 < self.tau < 1):
            raise ValueError("tau must be in (0, 1)")
        if self.n_ptb < 1:
            raise ValueError("n_ptb must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.guidance_main < 0 or self.guidance_low < 0:
            raise ValueError("guidance factors must be >= 0")
        if self.steps_T < 1:
            raise ValueError("steps_T must be >= 1")
        if self.diversity_n < 2:
            raise ValueError("diversity_n must be >= 2")
        if self.fairness_k < 1:
            raise ValueError("fairness_k must be >= 1")
        if not (0 <= self.trigger_rate <= 1):
            raise ValueError("trigger_rate must be in [0, 1]")
        if self.crossing_rule not in CROSSING_RULES:
            raise ValueError(f"crossing_rule must be one of {CROSSING_RULES}")

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: dict) -> "AuditConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "AuditConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("config document must be a JSON object")
        return cls.from_json_dict(data)

    def with_overrides(self, **kwargs) -> "AuditConfig":
        return replace(self, **kwargs)


def derive_seed(base_seed: int, context: Sequence[tuple[str, int]]) -> int:
    """Derive a 64-bit seed from a base seed and an ordered labeled context.

    Pure and platform-stable: the context is packed into a canonical byte
    string and hashed, so equal inputs always map to the same seed and
    distinct contexts collide with probability ~2**-64.
    """
    if not context:
        raise ValueError("seed derivation context must be non-empty")
    h = hashlib.sha256()
    h.update(struct.pack(">Q", base_seed & _U64))
    for label, value in context:
        lb = label.encode("utf-8")
        h.update(struct.pack(">I", len(lb)))
        h.update(lb)
        h.update(struct.pack(">Q", int(value) & _U64))
    return int.from_bytes(h.digest()[:8], "big")


def key64(text: str) -> int:
    """Stable 64-bit key for a string, for use as a seed-context value."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def canonical_json(obj) -> str:
    """Serialize to JSON with sorted keys and no whitespace.

    Re-serializing a parsed document through this function is byte-stable,
    which makes the output safe to hash into run manifests.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
