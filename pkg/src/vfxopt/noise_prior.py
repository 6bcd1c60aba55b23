"""Temporally filtered noise prior via two-stage SVD projection.

Inverted noise from a reference clip carries both the motion pattern we
want to reuse and spatial appearance that would leak into new scenes.
The filter runs two projections, each on a different unfolding of the
(C,F,H,W) tensor:

  stage 1, spatial suppression: unfold to (C*F) x (H*W), drop the top
      singular directions holding a fraction rho_s of the spectral
      energy.  Those dominant spatial modes encode appearance.

  stage 2, temporal retention: unfold the result to (C*H*W) x F with
      frames as columns, keep only the top singular directions holding a
      fraction rho_m of the remaining energy.  Those dominant temporal
      modes encode motion.

Rank selection is by cumulative squared singular values.  For
suppression, k is the smallest count whose removed energy reaches
rho_s * total, so rho_s = 0 removes nothing.  For retention, k is the
smallest count >= 1 whose kept energy reaches rho_m * total, so
rho_m = 1 keeps full rank.  Values below 1e-7 of the largest singular
value count as numerical zeros when determining rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensors import LatentTensor

SPECTRUM_FLOOR = 1e-7


class DegenerateSpectrumError(ValueError):
    """All singular values are zero; rank selection is undefined."""


@dataclass(frozen=True)
class ProjectionThresholds:
    """Energy fractions for the two projection stages."""

    rho_s: float = 0.1
    rho_m: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho_s <= 1.0:
            raise ValueError(f"rho_s must be in [0, 1], got {self.rho_s}")
        if not 0.0 <= self.rho_m <= 1.0:
            raise ValueError(f"rho_m must be in [0, 1], got {self.rho_m}")


@dataclass(frozen=True)
class BlendWeight:
    """Mixing weight for the temporal prior in the final sampling noise."""

    alpha: float = 0.001

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def _effective_spectrum(singular_values) -> tuple[np.ndarray, int]:
    """Validate a descending non-negative spectrum; zero out numerical noise.

    Returns the cleaned values and the effective rank.  Raises
    DegenerateSpectrumError when nothing survives the floor.
    """
    values = np.asarray(singular_values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("singular values must be a non-empty 1-D sequence")
    if np.any(values < 0):
        raise ValueError("singular values must be non-negative")
    if np.any(values[1:] > values[:-1]):
        raise ValueError("singular values must be sorted in descending order")
    top = values[0]
    if top <= 0.0:
        raise DegenerateSpectrumError("spectrum is all zero")
    cleaned = np.where(values < SPECTRUM_FLOOR * top, 0.0, values)
    rank = int(np.count_nonzero(cleaned))
    return cleaned, rank


def select_rank_removed(singular_values, rho_s: float) -> int:
    """Smallest k >= 0 whose leading k squared values reach rho_s of total energy."""
    if not 0.0 <= rho_s <= 1.0:
        raise ValueError(f"rho_s must be in [0, 1], got {rho_s}")
    values, rank = _effective_spectrum(singular_values)
    energy = np.cumsum(values * values)
    total = energy[-1]
    removed = 0.0
    for k in range(rank + 1):
        removed = 0.0 if k == 0 else energy[k - 1]
        if removed >= rho_s * total:
            return k
    return rank


def select_rank_retained(singular_values, rho_m: float) -> int:
    """Smallest k >= 1 whose leading k squared values reach rho_m of total energy."""
    if not 0.0 < rho_m <= 1.0:
        raise ValueError(f"rho_m must be in (0, 1], got {rho_m}")
    values, rank = _effective_spectrum(singular_values)
    energy = np.cumsum(values * values)
    total = energy[-1]
    for k in range(1, rank + 1):
        if energy[k - 1] >= rho_m * total:
            return k
    return rank


def _spatial_unfold(data: np.ndarray) -> np.ndarray:
    c, f, h, w = data.shape
    return data.reshape(c * f, h * w)


def _spatial_fold(matrix: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    return matrix.reshape(shape)


def _temporal_unfold(data: np.ndarray) -> np.ndarray:
    # Frames become columns: (C,F,H,W) -> (C,H,W,F) -> (C*H*W, F).
    c, f, h, w = data.shape
    return np.transpose(data, (0, 2, 3, 1)).reshape(c * h * w, f)


def _temporal_fold(matrix: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    c, f, h, w = shape
    return np.transpose(matrix.reshape(c, h, w, f), (0, 3, 1, 2))


def suppress_spatial(noise: LatentTensor, rho_s: float) -> LatentTensor:
    """Stage 1: zero the top singular directions of the spatial unfolding.

    rho_s = 0 is an exact pass-through.
    """
    shape = noise.shape
    if min(shape.c * shape.f, shape.h * shape.w) < 2:
        raise ValueError(
            f"spatial unfolding must be at least 2x2, got {shape.c * shape.f}x{shape.h * shape.w}"
        )
    matrix = _spatial_unfold(noise.data.astype(np.float64))
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    k = select_rank_removed(s, rho_s)
    if k == 0:
        return noise
    s = np.where(s < SPECTRUM_FLOOR * s[0], 0.0, s)
    s[:k] = 0.0
    rebuilt = (u * s) @ vt
    return LatentTensor(_spatial_fold(rebuilt, noise.data.shape).astype(np.float32))


def retain_temporal(noise: LatentTensor, rho_m: float) -> LatentTensor:
    """Stage 2: keep only the top singular directions of the temporal unfolding."""
    shape = noise.shape
    if shape.f < 2:
        raise ValueError(f"temporal retention needs at least 2 frames, got {shape.f}")
    matrix = _temporal_unfold(noise.data.astype(np.float64))
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    k = select_rank_retained(s, rho_m)
    s = s.copy()
    s[k:] = 0.0
    rebuilt = (u * s) @ vt
    return LatentTensor(_temporal_fold(rebuilt, noise.data.shape).astype(np.float32))


def enhance_noise(noise: LatentTensor, thresholds: ProjectionThresholds) -> LatentTensor:
    """Both stages in order: spatial suppression, then temporal retention."""
    return retain_temporal(suppress_spatial(noise, thresholds.rho_s), thresholds.rho_m)


def blend(temporal_prior: LatentTensor, fresh_noise: LatentTensor, alpha: float) -> LatentTensor:
    """Variance-preserving mix: sqrt(alpha) * prior + sqrt(1 - alpha) * fresh.

    Exact pass-through at the endpoints: alpha = 0 returns the fresh
    noise unchanged, alpha = 1 the prior.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if temporal_prior.data.shape != fresh_noise.data.shape:
        raise ValueError(
            f"shape mismatch: prior {temporal_prior.data.shape} vs fresh {fresh_noise.data.shape}"
        )
    w_prior = math.sqrt(alpha)
    w_fresh = math.sqrt(1.0 - alpha)
    mixed = w_prior * temporal_prior.data.astype(np.float64) + w_fresh * fresh_noise.data.astype(
        np.float64
    )
    return LatentTensor(mixed.astype(np.float32))
