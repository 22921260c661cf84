"""Routing latent channels between the autoregressive prior and a unit Gaussian.

Two variants:

* post-flow: ``[z_hat, z_tilde] = f(x)``; the first ``d`` channels of every
  token go to the autoregressive model, the rest get a standard normal prior.
* pre-flow: patches are mapped by a learnable invertible ``W`` first; the first
  ``d`` channels of ``x W^T`` enter the flow, the rest get the Gaussian prior,
  and the likelihood gains ``T * log|det W|``.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
import torch.nn as nn

from .flow import patchify

LOG_2PI = math.log(2 * math.pi)
CONDITION_WARNING = 1e6


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


def split_post_flow(z: torch.Tensor, d: int):
    if not 1 <= d <= z.shape[-1]:
        raise IndexError(f"cannot keep {d} of {z.shape[-1]} channels")
    return z[..., :d], z[..., d:]


def merge(z_hat: torch.Tensor, z_tilde: torch.Tensor) -> torch.Tensor:
    return torch.cat([z_hat, z_tilde], dim=-1)


def gaussian_logprob(v: torch.Tensor) -> torch.Tensor:
    """Standard normal log-density summed over the trailing [T, C] axes, float64."""
    v = v.to(torch.float64)
    return -0.5 * (v.square() + LOG_2PI).sum(dim=(-1, -2))


class InvertibleLinear(nn.Module):
    """Dense learnable channel map ``x -> x W^T`` with an LU-based log-determinant."""

    def __init__(self, channels: int, init: str = "identity", seed: int = 0,
                 matrix: np.ndarray | torch.Tensor | None = None):
        super().__init__()
        if matrix is not None:
            w = torch.as_tensor(np.asarray(matrix), dtype=torch.float32)
        elif init == "identity":
            w = torch.eye(channels)
        elif init == "random_orthogonal":
            g = torch.Generator().manual_seed(seed)
            q, r = torch.linalg.qr(torch.randn(channels, channels, generator=g, dtype=torch.float64))
            w = (q * torch.sign(torch.diagonal(r))).float()
        elif init == "pca":
            raise ValueError("pca init needs data; build W with pca_init() and pass matrix=")
        else:
            raise ValueError(f"unknown init {init!r}")
        if w.shape != (channels, channels):
            raise ValueError("matrix shape does not match channel count")
        self.weight = nn.Parameter(w.contiguous())

    def slogdet(self):
        sign, logabs = torch.linalg.slogdet(self.weight.to(torch.float64))
        if sign == 0 or not torch.isfinite(logabs):
            raise SingularMatrixError("linear map is singular")
        return sign, logabs

    def condition_number(self) -> float:
        return float(torch.linalg.cond(self.weight.detach().to(torch.float64)))


def apply_linear(xp: torch.Tensor, linear: InvertibleLinear, d: int):
    """Map patches [B, T, C] to ``(x_hat [B,T,d], x_tilde [B,T,C-d], volume [B])``."""
    _, logabs = linear.slogdet()
    y = xp @ linear.weight.T
    x_hat, x_tilde = split_post_flow(y, d)
    volume = (xp.shape[-2] * logabs).expand(xp.shape[:-2])
    return x_hat, x_tilde, volume


def invert_linear(x_hat: torch.Tensor, x_tilde: torch.Tensor, linear: InvertibleLinear) -> torch.Tensor:
    linear.slogdet()  # raises on singular W
    cond = linear.condition_number()
    if cond > CONDITION_WARNING:
        warnings.warn(f"inverting an ill-conditioned linear map (cond={cond:.3g})", RuntimeWarning)
    y = merge(x_hat, x_tilde)
    w = linear.weight.to(y.dtype)
    # x W^T = y  <=>  W x^T = y^T
    return torch.linalg.solve(w, y.transpose(-1, -2)).transpose(-1, -2)


def pca_init(images: np.ndarray, p: int) -> np.ndarray:
    """Rows = principal directions of the flattened patches, by descending variance.

    ``images`` is [N, H, W, 3] (8-bit or dequantized floats). No whitening is
    applied, so the returned matrix is orthogonal.
    """
    x = np.asarray(images, dtype=np.float64)
    patches = patchify(torch.from_numpy(x), p).reshape(-1, 3 * p * p).numpy()
    centered = patches - patches.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    c = patches.shape[1]
    tol = sv.max(initial=0.0) * max(centered.shape) * np.finfo(np.float64).eps
    if len(sv) < c or np.sum(sv > tol) < c:
        raise DegenerateCovarianceError(f"patch sample has rank < {c}; PCA directions are not unique")
    # fix the sign so the largest-magnitude entry of every row is positive
    signs = np.sign(vt[np.arange(c), np.abs(vt).argmax(axis=1)])
    return vt * signs[:, None]
