"""Transformer building blocks shared by the flow predictors and the decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def rope_tables(positions: torch.Tensor, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape [B, L, head_dim // 2] for integer positions [B, L]."""
    half = head_dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[..., None] * inv_freq
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, L, hd]; cos/sin: [B, L, hd/2]
    cos = cos[:, None].to(x.dtype)
    sin = sin[:, None].to(x.dtype)
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    """Multi-head attention with grouped key/value heads and optional RoPE."""

    def __init__(self, width: int, num_heads: int, num_kv_heads: int | None = None):
        super().__init__()
        num_kv_heads = num_kv_heads or num_heads
        if width % num_heads or num_heads % num_kv_heads:
            raise ValueError("width/heads/kv-heads are not compatible")
        self.num_heads = num_heads
        self.num_kv_heads = num_kv_heads
        self.head_dim = width // num_heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * num_kv_heads * self.head_dim)
        self.out = nn.Linear(width, width)

    def forward(self, x, mask=None, rope=None, cache=None):
        """Attend over ``x`` [B, L, width].

        ``mask`` is a boolean [B, L, S] (True = may attend), where S counts cached
        keys plus the new ones. ``cache`` is an optional ``(k, v)`` pair from
        earlier calls; the updated pair is returned alongside the output.
        """
        b, l, _ = x.shape
        q = self.q(x).view(b, l, self.num_heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(x).view(b, l, 2, self.num_kv_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if rope is not None:
            q = apply_rope(q, *rope)
            k = apply_rope(k, *rope)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        new_cache = (k, v)
        rep = self.num_heads // self.num_kv_heads
        if rep > 1:
            k = k.repeat_interleave(rep, dim=1)
            v = v.repeat_interleave(rep, dim=1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        # every query must see at least one key (callers always allow self-attention)
        weights = torch.softmax(scores, dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(b, l, -1)
        return self.out(y), new_cache


class Block(nn.Module):
    """Pre-norm transformer block: attention then GELU MLP, dropout on both outputs."""

    def __init__(self, width, num_heads, num_kv_heads=None, mlp_ratio=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, num_heads, num_kv_heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None, rope=None, cache=None):
        h, new_cache = self.attn(self.norm1(x), mask=mask, rope=rope, cache=cache)
        x = x + self.drop(h)
        x = x + self.drop(self.mlp(self.norm2(x)))
        return x, new_cache


def zero_init_(linear: nn.Linear) -> nn.Linear:
    nn.init.zeros_(linear.weight)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)
    return linear


def causal_mask(length: int) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool).tril()

