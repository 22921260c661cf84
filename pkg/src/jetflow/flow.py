"""Invertible patch-token flow built from affine coupling blocks.

Each block keeps half of the channels (the pass-through half) and rescales the
other half with an element-wise affine map whose shift and scale are predicted
from the pass-through half by a small ViT:

    y_out = (y_in + shift) * sigmoid(raw_scale)

so the Jacobian is triangular and its log-determinant is the sum of
``log sigmoid(raw_scale)`` over the transformed entries.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Block, zero_init_


class FlowOutput(NamedTuple):
    latents: torch.Tensor  # [B, T, C]
    logdet: torch.Tensor  # [B], float64, nats


def patchify(image: torch.Tensor, p: int) -> torch.Tensor:
    """Split ``[..., H, W, 3]`` images into row-major patches ``[..., T, p*p*3]``.

    Channels inside a patch are ordered (pixel row, pixel column, RGB).
    """
    *lead, h, w, c = image.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, height: int, width: int, p: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    *lead, t, c = tokens.shape
    if height % p or width % p or t != (height // p) * (width // p) or c % (p * p):
        raise ValueError("token grid does not match the requested image shape")
    ch = c // (p * p)
    x = tokens.reshape(*lead, height // p, width // p, p, p, ch)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, ch)


class Predictor(nn.Module):
    """ViT mapping the pass-through half [B, T, C/2] to (raw_scale, shift)."""

    def __init__(self, half: int, num_tokens: int, width: int, depth: int, heads: int,
                 input_scale: float = 1 / 64):
        super().__init__()
        self.input_scale = input_scale
        self.embed = nn.Linear(half, width)
        self.pos = nn.Parameter(torch.randn(1, num_tokens, width) / width**0.5)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        # zero init: every block starts at shift 0, scale sigmoid(0) = 0.5
        self.head = zero_init_(nn.Linear(width, 2 * half))

    def forward(self, y_pass: torch.Tensor):
        h = self.embed(y_pass * self.input_scale) + self.pos
        for block in self.blocks:
            h, _ = block(h)
        raw_scale, shift = self.head(self.norm(h)).chunk(2, dim=-1)
        return raw_scale, shift


class CouplingBlock(nn.Module):
    """One affine coupling block over a fixed channel partition."""

    def __init__(self, partition: np.ndarray | torch.Tensor, num_tokens: int,
                 width: int = 64, depth: int = 2, heads: int = 4):
        super().__init__()
        partition = torch.as_tensor(np.asarray(partition), dtype=torch.bool)
        channels = partition.numel()
        if channels % 2 or int(partition.sum()) != channels // 2:
            raise ValueError("partition must select exactly half of an even channel count")
        self.register_buffer("partition", partition)
        idx = torch.arange(channels)
        self.register_buffer("pass_idx", idx[partition])
        self.register_buffer("tran_idx", idx[~partition])
        self.register_buffer("unperm", torch.argsort(torch.cat([idx[partition], idx[~partition]])))
        self.predictor = Predictor(channels // 2, num_tokens, width, depth, heads)

    @property
    def channels(self) -> int:
        return self.partition.numel()

    def _check(self, y):
        if y.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {y.shape[-1]}")

    def _merge(self, y_pass, y_tran):
        return torch.cat([y_pass, y_tran], dim=-1)[..., self.unperm]

    def forward(self, y: torch.Tensor):
        self._check(y)
        y_pass, y_tran = y[..., self.pass_idx], y[..., self.tran_idx]
        raw_scale, shift = self.predictor(y_pass)
        out = (y_tran + shift) * torch.sigmoid(raw_scale)
        logdet = F.logsigmoid(raw_scale).to(torch.float64).sum(dim=(-1, -2))
        return self._merge(y_pass, out), logdet

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        self._check(y)
        y_pass, y_tran = y[..., self.pass_idx], y[..., self.tran_idx]
        raw_scale, shift = self.predictor(y_pass)
        scale = torch.sigmoid(raw_scale)
        if bool((scale == 0).any()):
            raise FloatingPointError("coupling scale underflowed to zero; block is not invertible")
        return self._merge(y_pass, y_tran / scale - shift)


def coupling_forward(block: CouplingBlock, y: torch.Tensor):
    """Apply one coupling block; returns ``(y_next, logdet)`` with logdet per example."""
    return block(y)


def coupling_inverse(block: CouplingBlock, y: torch.Tensor) -> torch.Tensor:
    return block.inverse(y)


def random_partitions(channels: int, depth: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(depth):
        mask = np.zeros(channels, dtype=bool)
        mask[rng.permutation(channels)[: channels // 2]] = True
        masks.append(mask)
    return masks


class Flow(nn.Module):
    """Stack of coupling blocks. ``depth=0`` is the identity map."""

    def __init__(self, channels: int, num_tokens: int, depth: int = 8, width: int = 64,
                 block_depth: int = 2, heads: int = 4, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(
            CouplingBlock(mask, num_tokens, width, block_depth, heads)
            for mask in random_partitions(channels, depth, seed)
        )

    def forward(self, x: torch.Tensor) -> FlowOutput:
        return flow_forward(self.blocks, x)

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        return flow_inverse(self.blocks, z)


def flow_forward(blocks: Sequence[CouplingBlock], x: torch.Tensor) -> FlowOutput:
    logdet = torch.zeros(x.shape[:-2], dtype=torch.float64)
    for block in blocks:
        x, ld = block(x)
        logdet = logdet + ld
    return FlowOutput(x, logdet)


def flow_inverse(blocks: Sequence[CouplingBlock], z: torch.Tensor) -> torch.Tensor:
    for block in reversed(list(blocks)):
        z = block.inverse(z)
    return z


def randomize_(module: nn.Module, scale: float = 0.5, generator: torch.Generator | None = None):
    """Overwrite every floating parameter with N(0, scale^2/fan_in)-style noise.

    Zero-initialized heads make a fresh flow nearly linear; tests and checks use
    this to exercise the nonlinear, non-constant-scale regime.
    """
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p.shape[-1] if p.ndim > 1 else 1
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale / fan_in**0.5)
    return module
