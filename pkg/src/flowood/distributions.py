"""Base densities and pixel preprocessing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from flowood.tensor import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)
LEVELS = 256
_NOISE_MAX = 1.0 - 2.0**-40


@dataclass(frozen=True)
class StandardNormal:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")

    def log_prob(self, z) -> Tensor:
        """Per-sample log density. ``z`` is either a single event of ``dim``
        elements or a batch whose trailing axes hold ``dim`` elements."""
        z = as_tensor(z)
        if z.size == self.dim:
            return -0.5 * self.dim * LOG_2PI - 0.5 * (z * z).sum()
        per = int(np.prod(z.shape[1:])) if z.ndim > 1 else 1
        if per != self.dim:
            raise ValueError(f"expected events of {self.dim} elements, got shape {z.shape}")
        return gaussian_log_prob(z)

    def sample(self, n: int, seed: int) -> Tensor:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        return Tensor(rng.standard_normal((n, self.dim)))


def gaussian_log_prob(z) -> Tensor:
    """Standard normal log density summed over all but the batch axis."""
    z = as_tensor(z)
    d = int(np.prod(z.shape[1:]))
    axes = tuple(range(1, z.ndim))
    return -0.5 * d * LOG_2PI - 0.5 * (z * z).sum(axis=axes)


def dequantization_correction(num_dims: int) -> float:
    """Log-likelihood offset mapping a density on [-0.5, 0.5) back to 256-level pixels."""
    return -num_dims * math.log(LEVELS)


def dequantize(img, seed=None, rng: np.random.Generator | None = None, noise=None):
    """Map integer pixels in [0, 255] to continuous values in [-0.5, 0.5).

    Returns ``(values, correction)`` where ``correction`` is the per-sample
    log-likelihood offset for the number of dimensions of one image
    (all but the leading batch axis when ``img`` has rank 4).
    """
    img = np.asarray(img)
    if img.size and (img.min() < 0 or img.max() > LEVELS - 1):
        raise ValueError("pixel values must lie in [0, 255]")
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(seed)
        noise = rng.random(img.shape)
    # keeps img + noise strictly below img + 1 after rounding
    noise = np.minimum(noise, _NOISE_MAX)
    values = (img.astype(np.float64) + noise) / LEVELS - 0.5
    per_sample = img[0].size if img.ndim == 4 else img.size
    return values, dequantization_correction(per_sample)


def quantize(values: np.ndarray) -> np.ndarray:
    """Recover integer pixels from dequantized values."""
    return np.floor((np.asarray(values) + 0.5) * LEVELS).astype(np.int64)


def bits_per_dim(log_likelihood, h: int, w: int, c: int):
    if min(h, w, c) < 1:
        raise ValueError("extents must be >= 1")
    out = -np.asarray(log_likelihood, dtype=np.float64) / (h * w * c * math.log(2.0))
    return float(out) if out.ndim == 0 else out
