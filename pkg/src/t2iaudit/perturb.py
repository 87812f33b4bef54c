"""Bounded multiplicative perturbations of token-embedding matrices.

A perturbation scales embedding entries by factors drawn uniformly from
[1 - phi, 1 + phi] where phi = step_index * delta_p * sigma of the chosen
scope. Global scope rescales every entry; local scope rescales one token row
and leaves every other row bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EmbeddingMatrix

__all__ = [
    "DegenerateEmbeddingError",
    "PerturbationSpec",
    "sigma_global",
    "sigma_local",
    "phi_magnitude",
    "apply",
]


class DegenerateEmbeddingError(ValueError):
    """Raised when sigma of the perturbation scope is zero.

    A zero spread leaves phi undefined; callers must report the prompt or
    token as degenerate rather than invent a magnitude.
    """


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation draw: scope, step on the magnitude ladder, and seed.

    ``token_index is None`` means global scope.
    """

    token_index: Optional[int]
    step_index: int
    delta_p: float
    seed: int

    def __post_init__(self) -> None:
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")
        if self.delta_p <= 0:
            raise ValueError("delta_p must be > 0")

    @property
    def scope(self) -> str:
        return "global" if self.token_index is None else "local"


def sigma_global(x: EmbeddingMatrix) -> float:
    """Population standard deviation over all n*d entries."""
    return float(np.std(x.values))


def sigma_local(x: EmbeddingMatrix, token_index: int) -> float:
    """Population standard deviation over the entries of one token row."""
    if not (0 <= token_index < x.rows):
        raise IndexError(f"token_index {token_index} out of range for {x.rows} rows")
    if x.tokens[token_index].special:
        raise ValueError(f"row {token_index} is a special token and cannot be swept")
    return float(np.std(x.values[token_index]))


def phi_magnitude(x: EmbeddingMatrix, spec: PerturbationSpec) -> float:
    """phi for this spec: step_index * delta_p * sigma of the scope."""
    if spec.token_index is None:
        sigma = sigma_global(x)
    else:
        sigma = sigma_local(x, spec.token_index)
    if sigma == 0.0:
        scope = "matrix" if spec.token_index is None else f"row {spec.token_index}"
        raise DegenerateEmbeddingError(f"sigma of {scope} is zero; phi undefined")
    return spec.step_index * spec.delta_p * sigma


def apply(x: EmbeddingMatrix, spec: PerturbationSpec) -> EmbeddingMatrix:
    """Scale x by factors drawn i.i.d. uniform from [1 - phi, 1 + phi].

    Seeded and pure: the same (x, spec) pair always yields the same matrix.
    Local scope copies all other rows bit-exactly; token alignment is kept.
    """
    phi = phi_magnitude(x, spec)
    rng = np.random.default_rng(spec.seed)
    values = np.array(x.values, dtype=np.float64)
    if spec.token_index is None:
        factors = rng.uniform(1.0 - phi, 1.0 + phi, size=values.shape)
        values = values * factors
    else:
        factors = rng.uniform(1.0 - phi, 1.0 + phi, size=values.shape[1])
        values[spec.token_index] = values[spec.token_index] * factors
    return x.with_values(values)
