"""Training-time input transforms: RGB noise curriculum, dequantization, latent jitter."""

from __future__ import annotations

import math

import numpy as np
import torch


def noise_sigma(t: float, sigma0: float = 64.0, sigma_end: float = 0.0) -> float:
    """Cosine-decayed pixel noise std at training progress ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training progress t={t} outside [0, 1]")
    return sigma_end + (sigma0 - sigma_end) * (1.0 + math.cos(t * math.pi)) / 2.0


def apply_rgb_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """floor(I + sigma * N(0, 1)), clamped back into [0, 255]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return image.copy()
    noisy = np.floor(image.astype(np.float64) + sigma * rng.standard_normal(image.shape))
    return np.clip(noisy, 0, 255).astype(np.uint8)


def dequantize(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add U[0, 1) noise to 8-bit values, giving floats in [0, 256)."""
    return image.astype(np.float64) + rng.random(image.shape)


def latent_jitter(z: torch.Tensor, std: float = 0.3, generator: torch.Generator | None = None) -> torch.Tensor:
    """z + std * N(0, I); the noise is additive so gradients pass straight through."""
    if std == 0:
        return z
    noise = torch.randn(z.shape, generator=generator, dtype=torch.float64).to(z.dtype)
    return z + std * noise
