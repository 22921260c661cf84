"""Diagonal Gaussian-mixture head over soft tokens, with guided sampling."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch

LOG_2PI = math.log(2 * math.pi)
LOG_SCALE_MIN, LOG_SCALE_MAX = -7.0, 7.0


class GmmParams(NamedTuple):
    logits: torch.Tensor  # [..., k]
    means: torch.Tensor  # [..., k, d]
    log_scales: torch.Tensor  # [..., k, d]

    @property
    def k(self) -> int:
        return self.logits.shape[-1]

    @property
    def d(self) -> int:
        return self.means.shape[-1]

    @classmethod
    def from_head(cls, raw: torch.Tensor, k: int, d: int) -> "GmmParams":
        """Unpack a head output of width ``k * (2d + 1)``; log-scales are clamped."""
        if raw.shape[-1] != k * (2 * d + 1):
            raise ValueError(f"head width {raw.shape[-1]} != k*(2d+1) = {k * (2 * d + 1)}")
        lead = raw.shape[:-1]
        logits = raw[..., :k]
        rest = raw[..., k:].reshape(*lead, k, 2, d)
        log_scales = rest[..., 1, :].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)
        return cls(logits, rest[..., 0, :], log_scales)

    def index(self, idx) -> "GmmParams":
        return GmmParams(self.logits[idx], self.means[idx], self.log_scales[idx])

    def expand(self, n: int) -> "GmmParams":
        return GmmParams(*(t.unsqueeze(0).expand(n, *t.shape) for t in self))


def component_logprob(params: GmmParams, target: torch.Tensor) -> torch.Tensor:
    """log N(target; mu_k, diag sigma_k^2) for every component, shape [..., k]."""
    z = (target.unsqueeze(-2) - params.means) * torch.exp(-params.log_scales)
    return -0.5 * (z.square() + LOG_2PI).sum(-1) - params.log_scales.sum(-1)


def gmm_logprob(params: GmmParams, target: torch.Tensor) -> torch.Tensor:
    log_w = torch.log_softmax(params.logits, dim=-1)
    return torch.logsumexp(log_w + component_logprob(params, target), dim=-1)


def gmm_nll(params: GmmParams, target: torch.Tensor) -> torch.Tensor:
    """Negative log-density of ``target`` [..., d] in nats, one value per token.

    Differentiable in both the parameters and the target.
    """
    return -gmm_logprob(params, target)


def _flat(params: GmmParams):
    lead = params.logits.shape[:-1]
    k, d = params.k, params.d
    return lead, GmmParams(params.logits.reshape(-1, k), params.means.reshape(-1, k, d),
                           params.log_scales.reshape(-1, k, d))


@torch.no_grad()
def gmm_sample(params: GmmParams, generator: torch.Generator | None = None,
               tau_mix: float = 1.0, tau_scale: float = 1.0) -> torch.Tensor:
    """Ancestral sample: component from softmax(logits / tau_mix), then the Gaussian.

    Draws one uniform per token for the component and then ``d`` normals per
    token, so results are reproducible from the generator state.
    """
    lead, flat = _flat(params)
    n = flat.logits.shape[0]
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    if tau_mix > 0:
        probs = torch.softmax(flat.logits.to(torch.float64) / tau_mix, dim=-1)
        cdf = probs.cumsum(-1)
        comp = torch.searchsorted(cdf, (u * cdf[:, -1]).unsqueeze(-1)).squeeze(-1)
        comp = comp.clamp_max(params.k - 1)
    else:
        comp = flat.logits.argmax(-1)
    eps = torch.randn(n, params.d, generator=generator, dtype=torch.float64).to(flat.means.dtype)
    rows = torch.arange(n)
    mu = flat.means[rows, comp]
    sigma = torch.exp(flat.log_scales[rows, comp])
    return (mu + tau_scale * sigma * eps).reshape(*lead, params.d)


@torch.no_grad()
def cfg_sample(params_cond: GmmParams, params_uncond: GmmParams, guidance: float,
               generator: torch.Generator | None = None, candidates: int = 64,
               tau_mix: float = 1.0, tau_scale: float = 1.0, stats: dict | None = None) -> torch.Tensor:
    """Sample from the guided density  p_c^(1+guidance) * p_u^(-guidance)  (normalized).

    ``candidates`` proposals are drawn from the conditional mixture and one is
    picked with probability proportional to ``(p_c / p_u) ** guidance``. The
    first proposal is exactly what :func:`gmm_sample` would return, so
    ``guidance == 0`` reproduces plain sampling draw for draw.
    """
    if guidance < 0 or candidates < 1:
        raise ValueError("need guidance >= 0 and at least one candidate")
    first = gmm_sample(params_cond, generator, tau_mix, tau_scale)
    if guidance == 0 or candidates == 1:
        return first
    rest = gmm_sample(params_cond.expand(candidates - 1), generator, tau_mix, tau_scale)
    cand = torch.cat([first.unsqueeze(0), rest], dim=0)  # [K, ..., d]
    log_w = guidance * (gmm_logprob(params_cond, cand) - gmm_logprob(params_uncond, cand))
    log_w = log_w.to(torch.float64)
    bad = ~torch.isfinite(log_w).any(dim=0)
    log_w = torch.where(torch.isnan(log_w), torch.tensor(-math.inf, dtype=log_w.dtype), log_w)
    log_w = torch.where(bad.unsqueeze(0), torch.zeros_like(log_w), log_w)
    if stats is not None:
        stats["cfg_degenerate"] = stats.get("cfg_degenerate", 0) + int(bad.sum())
    probs = torch.softmax(log_w, dim=0).reshape(candidates, -1).T  # [N, K]
    cdf = probs.cumsum(-1)
    u = torch.rand(cdf.shape[0], generator=generator, dtype=torch.float64)
    pick = torch.searchsorted(cdf, (u * cdf[:, -1]).unsqueeze(-1)).squeeze(-1).clamp_max(candidates - 1)
    flat = cand.reshape(candidates, -1, cand.shape[-1])
    return flat[pick, torch.arange(flat.shape[1])].reshape(first.shape)
