"""JetFormer assembly: flow + factoring + decoder, and the joint training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, scatter_soft
from .config import RunConfig
from .curriculum import latent_jitter
from .data import SOFT, TEXT, SequenceLayout
from .factoring import InvertibleLinear, apply_linear, gaussian_logprob, invert_linear, merge, split_post_flow
from .flow import Flow, patchify, unpatchify
from .gmm import gmm_nll

# pixels enter the flow shifted by this constant (volume preserving)
PIXEL_CENTER = 128.0
LN2 = math.log(2.0)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    """Batch-level loss terms.

    Image terms are means over the examples whose image is the loss target and
    are NaN when there are none. ``text_nll_sum`` is the per-example sum of text
    NLL averaged over the whole batch, so that

        total = image_fraction * image_bpd + text_weight * text_nll_sum
    """

    image_bpd: float
    ar_nll: float
    gaussian_nll: float
    logdet: float
    volume_term: float
    text_nll_per_token: float
    text_nll_sum: float
    image_fraction: float
    total: float

    def image_nll(self) -> float:
        return self.ar_nll + self.gaussian_nll - self.logdet - self.volume_term


class JetFormer(nn.Module):
    def __init__(self, cfg: RunConfig, pca_matrix: np.ndarray | None = None):
        super().__init__()
        self.cfg = cfg
        t = cfg.tokens_per_image
        self.flow = Flow(cfg.flow_channels, t, cfg.flow_depth, cfg.flow_width,
                         cfg.flow_block_depth, cfg.flow_heads, seed=cfg.seed)
        self.linear = None
        if cfg.factor_mode == "pre_flow_linear":
            self.linear = InvertibleLinear(cfg.patch_channels, cfg.factor_init, seed=cfg.seed, matrix=pca_matrix)
        self.backbone = Backbone(BackboneConfig(
            width=cfg.width, depth=cfg.depth, heads=cfg.heads, kv_heads=cfg.kv_heads,
            dropout=cfg.dropout, soft_dim=cfg.soft_dim, num_mixtures=cfg.num_mixtures,
            num_classes=cfg.num_classes, prefix_len=cfg.prefix_len,
        ))

    @property
    def layout(self) -> SequenceLayout:
        cfg = self.cfg
        return SequenceLayout(cfg.tokens_per_image, cfg.label_kind, cfg.max_text_len,
                              cfg.prefix_len, cfg.cond_drop, cfg.num_classes)

    @property
    def dims(self) -> int:
        return self.cfg.image_size**2 * 3

    # -- image <-> latents -------------------------------------------------

    def encode(self, x: torch.Tensor) -> dict:
        """Dequantized images [B, H, W, 3] in [0, 256) -> soft tokens and volume terms."""
        cfg = self.cfg
        patches = patchify(x - PIXEL_CENTER, cfg.patch_size)
        b = patches.shape[0]
        volume = torch.zeros(b, dtype=torch.float64)
        tail = None
        if cfg.factor_mode == "pre_flow_linear":
            patches, tail, volume = apply_linear(patches, self.linear, cfg.factor_dim)
        z, logdet = self.flow(patches)
        if cfg.factor_mode == "post_flow":
            z, tail = split_post_flow(z, cfg.factor_dim)
        if tail is None:
            tail = z[..., :0]
        return {"z_hat": z, "z_tilde": tail, "logdet": logdet, "volume": volume}

    def decode(self, z_hat: torch.Tensor, z_tilde: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`encode`; returns continuous images [B, H, W, 3]."""
        cfg = self.cfg
        if cfg.factor_mode == "post_flow":
            patches = self.flow.inverse(merge(z_hat, z_tilde))
        elif cfg.factor_mode == "pre_flow_linear":
            patches = invert_linear(self.flow.inverse(z_hat), z_tilde, self.linear)
        else:
            patches = self.flow.inverse(z_hat)
        return unpatchify(patches, cfg.image_size, cfg.image_size, cfg.patch_size) + PIXEL_CENTER

    def tail_channels(self) -> int:
        cfg = self.cfg
        return 0 if cfg.factor_mode == "none" else cfg.patch_channels - cfg.factor_dim

    # -- loss --------------------------------------------------------------

    def per_example_terms(self, images: torch.Tensor, batch: dict,
                          jitter_generator: torch.Generator | None = None) -> dict:
        """All loss terms per example (float64 tensors of shape [B])."""
        cfg = self.cfg
        enc = self.encode(images)
        z = enc["z_hat"]
        target_img = batch["image_is_target"]
        if cfg.stop_gradient_image_prefix:
            z = torch.where(target_img[:, None, None], z, z.detach())
        if self.training and cfg.jitter_std > 0:
            z = latent_jitter(z, cfg.jitter_std, jitter_generator)

        length = batch["kind"].shape[1]
        soft = scatter_soft(z, batch["image_start"], length)
        out = self.backbone.decode_teacher_forced(batch, soft)
        hidden = out.hidden[:, :-1]
        mask = batch["loss_mask"][:, 1:]
        nxt = batch["kind"][:, 1:]
        b = images.shape[0]
        rows = torch.arange(b)[:, None].expand_as(mask)

        soft_sel = mask & (nxt == SOFT)
        ar = torch.zeros(b, dtype=torch.float64)
        if bool(soft_sel.any()):
            params = self.backbone.gmm_params(hidden[soft_sel])
            nll = gmm_nll(params, soft[:, 1:][soft_sel]).to(torch.float64)
            ar = ar.index_add(0, rows[soft_sel], nll)

        text_sel = mask & (nxt == TEXT)
        text = torch.zeros(b, dtype=torch.float64)
        if bool(text_sel.any()):
            logits = self.backbone.text_logits(hidden[text_sel])
            ce = F.cross_entropy(logits.to(torch.float64), batch["token_id"][:, 1:][text_sel], reduction="none")
            text = text.index_add(0, rows[text_sel], ce)

        gauss = -gaussian_logprob(enc["z_tilde"]) if enc["z_tilde"].numel() else torch.zeros(b, dtype=torch.float64)
        image_nll = ar + gauss - enc["logdet"] - enc["volume"]
        return {
            "ar_nll": ar, "gaussian_nll": gauss, "logdet": enc["logdet"], "volume": enc["volume"],
            "image_nll": image_nll, "image_bpd": image_nll / (self.dims * LN2),
            "text_nll": text, "text_tokens": text_sel.sum(1), "image_is_target": target_img,
        }

    def loss(self, images: torch.Tensor, batch: dict, jitter_generator: torch.Generator | None = None):
        """Returns ``(total, LossBreakdown)``; ``total`` is the differentiable objective."""
        terms = self.per_example_terms(images, batch, jitter_generator)
        is_img = terms["image_is_target"]
        b = is_img.shape[0]
        zero = torch.zeros((), dtype=torch.float64)
        per_example = torch.where(is_img, terms["image_bpd"], zero) + self.cfg.text_weight * terms["text_nll"]
        total = per_example.mean()

        for name in ("ar_nll", "gaussian_nll", "logdet", "volume", "text_nll"):
            if not bool(torch.isfinite(terms[name]).all()):
                raise NonFiniteLossError(f"non-finite {name} in loss")

        n_img = int(is_img.sum())
        n_tok = int(terms["text_tokens"].sum())

        def img_mean(name):
            return float(terms[name][is_img].detach().mean()) if n_img else math.nan

        breakdown = LossBreakdown(
            image_bpd=img_mean("image_bpd"),
            ar_nll=img_mean("ar_nll"),
            gaussian_nll=img_mean("gaussian_nll"),
            logdet=img_mean("logdet"),
            volume_term=img_mean("volume"),
            text_nll_per_token=float(terms["text_nll"].detach().sum()) / n_tok if n_tok else math.nan,
            text_nll_sum=float(terms["text_nll"].detach().mean()),
            image_fraction=n_img / b,
            total=float(total.detach()),
        )
        return total, breakdown
