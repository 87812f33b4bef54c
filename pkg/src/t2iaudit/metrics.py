"""Numeric kernels: cosine similarity, diversity, fairness, KDE mode finding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ImageFeature, ReliabilityDistribution

__all__ = [
    "DEFAULT_CLAMP_EPS",
    "DEFAULT_GRID_POINTS",
    "SimilarityMatrix",
    "DistributionShift",
    "cosine",
    "diversity",
    "fairness_single",
    "fairness",
    "estimate_distribution",
    "compare_distributions",
]

DEFAULT_CLAMP_EPS = 1e-6
DEFAULT_GRID_POINTS = 512


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric N x N matrix of pairwise cosine similarities."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {v.shape}")
        if not np.allclose(v, v.T, atol=1e-9, rtol=0):
            raise ValueError("similarity matrix is not symmetric")
        if not np.allclose(np.diag(v), 1.0, atol=1e-9, rtol=0):
            raise ValueError("similarity matrix diagonal is not 1")
        if v.min() < -1.0 or v.max() > 1.0:
            raise ValueError("similarity entries outside [-1, 1]")

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DistributionShift:
    """How distribution ``b`` sits relative to baseline ``a``.

    ``mode_ratio`` is b.mode / a.mode; ``left_shifted`` is true when b peaks
    at a smaller magnitude with a taller peak than the baseline.
    """

    delta_phi_mo: float
    mode_ratio: float
    left_shifted: bool


def _checked_vector(f: ImageFeature) -> np.ndarray:
    v = f.values
    if float(np.linalg.norm(v)) <= 1e-12:
        raise ValueError("zero-norm feature")
    return v


def cosine(a: ImageFeature, b: ImageFeature) -> float:
    """Cosine similarity of two features, in [-1, 1].

    Bit-identical inputs short-circuit to exactly 1.0 so that downstream
    aggregates of a constant feature set are exact.
    """
    va, vb = _checked_vector(a), _checked_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"feature length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    if va is vb or np.array_equal(va, vb):
        return 1.0
    value = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return min(1.0, max(-1.0, value))


def diversity(features: Sequence[ImageFeature]) -> tuple[SimilarityMatrix, float]:
    """Pairwise similarity matrix and diversity score for N >= 2 features.

    The score is 1 - (sum of all N^2 cosines - N) / (N^2 - N), i.e. one
    minus the mean off-diagonal cosine; an identical set scores exactly 0.
    """
    n = len(features)
    if n < 2:
        raise ValueError("diversity needs at least 2 features")
    matrix = np.ones((n, n), dtype=np.float64)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            c = cosine(features[i], features[j])
            matrix[i, j] = c
            matrix[j, i] = c
            total += c
    score = 1.0 - (2.0 * total) / (n * n - n)
    return SimilarityMatrix(values=matrix), score


def fairness_single(
    left_out: ImageFeature, original: ImageFeature, clamp_eps: float = DEFAULT_CLAMP_EPS
) -> float:
    """Influence of a removed token on one generation: -ln(1 - cos).

    The cosine is clamped to 1 - clamp_eps so identical images map to a
    finite ceiling of -ln(clamp_eps). Natural log throughout.
    """
    if not (0 < clamp_eps <= 1e-3):
        raise ValueError("clamp_eps must be in (0, 1e-3]")
    c = cosine(left_out, original)
    return -math.log(1.0 - min(c, 1.0 - clamp_eps))


def fairness(
    left_out_set: Sequence[ImageFeature],
    originals: Sequence[ImageFeature],
    clamp_eps: float = DEFAULT_CLAMP_EPS,
) -> float:
    """Mean of fairness_single over K noise-matched (left-out, original) pairs."""
    if len(left_out_set) != len(originals):
        raise ValueError(
            f"length mismatch: {len(left_out_set)} left-out vs {len(originals)} originals"
        )
    if not left_out_set:
        raise ValueError("fairness needs at least one pair")
    scores = [
        fairness_single(lo, orig, clamp_eps) for lo, orig in zip(left_out_set, originals)
    ]
    return float(sum(scores) / len(scores))


def estimate_distribution(
    samples: Sequence[float], grid_points: int = DEFAULT_GRID_POINTS, censored_count: int = 0
) -> ReliabilityDistribution:
    """Gaussian-kernel KDE over crossing magnitudes with modal characterization.

    Bandwidth is Scott's rule h = std * m**(-1/5) (population std), falling
    back to 0.01 when the samples have zero spread. The grid spans
    [0, max * 1.1] with ``grid_points`` points and the density is normalized
    to integrate to 1 over the grid (trapezoidal rule). The modal value is
    the grid point of the density argmax, smallest index on ties.
    """
    arr = np.asarray(sorted(float(s) for s in samples), dtype=np.float64)
    if arr.size < 2:
        raise ValueError("distribution estimation needs at least 2 samples")
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    std = float(np.std(arr))
    h = std * arr.size ** (-1.0 / 5.0) if std > 0 else 0.01
    grid = np.linspace(0.0, float(arr.max()) * 1.1, grid_points)
    # Direct O(m * grid) kernel sum; summation order over samples is fixed.
    z = (grid[:, None] - arr[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (arr.size * h * math.sqrt(2.0 * math.pi))
    area = float(np.trapezoid(density, grid))
    if area <= 0:
        raise ValueError("degenerate density; cannot normalize")
    density = density / area
    peak = int(np.argmax(density))
    return ReliabilityDistribution(
        samples=arr,
        grid=grid,
        density=density,
        phi_mo=float(grid[peak]),
        mode=float(density[peak]),
        censored_count=censored_count,
    )


def compare_distributions(
    a: ReliabilityDistribution, b: ReliabilityDistribution
) -> DistributionShift:
    """Compare candidate ``b`` against baseline ``a`` by peak location/height."""
    return DistributionShift(
        delta_phi_mo=a.phi_mo - b.phi_mo,
        mode_ratio=b.mode / a.mode,
        left_shifted=bool(b.phi_mo < a.phi_mo and b.mode > a.mode),
    )
