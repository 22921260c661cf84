"""Decoder-only transformer over mixed text / soft-token sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import BOUNDARY, CLASS, EOS, NOLABEL, PAD, SOFT, TEXT, VOCAB_SIZE, PackedSequence
from .gmm import GmmParams, cfg_sample, gmm_sample
from .layers import Block, causal_mask, rope_tables


def collate(seqs: Sequence[PackedSequence]) -> dict:
    """Stack packed sequences (right-padded to the longest) into [B, L] tensors."""
    length = max(len(s) for s in seqs)

    def stack(name, fill, dtype):
        out = np.full((len(seqs), length), fill, dtype=dtype)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = getattr(s, name)
        return torch.from_numpy(out)

    return {
        "kind": stack("kind", PAD, np.int64),
        "token_id": stack("token_id", 0, np.int64),
        "slot": stack("slot", 0, np.int64),
        "loss_mask": stack("loss_mask", False, bool),
        "position_ids": stack("position_ids", -1, np.int64),
        "image_start": torch.tensor([s.image_start for s in seqs], dtype=torch.int64),
        "image_is_target": torch.tensor([s.image_is_target for s in seqs]),
    }


def scatter_soft(latents: torch.Tensor, image_start: torch.Tensor, length: int) -> torch.Tensor:
    """Place image latents [B, T, d] at each example's image span of a [B, L, d] tensor."""
    b, t, d = latents.shape
    rel = torch.arange(length)[None, :] - image_start[:, None]
    inside = (rel >= 0) & (rel < t)
    gathered = latents.gather(1, rel.clamp(0, t - 1)[..., None].expand(b, length, d))
    return gathered * inside[..., None].to(latents.dtype)


def attention_mask(kind: torch.Tensor) -> torch.Tensor:
    """Causal mask that hides padding keys; every query keeps itself visible."""
    length = kind.shape[1]
    real = kind != PAD
    mask = causal_mask(length)[None] & real[:, None, :]
    return mask | torch.eye(length, dtype=torch.bool)[None]


class BackboneOutput(NamedTuple):
    hidden: torch.Tensor  # [B, L, width], output at t predicts token t+1
    next_kind: torch.Tensor  # [B, L], kind of token t+1 (PAD past the end)


@dataclass
class BackboneConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    kv_heads: int = 1
    dropout: float = 0.1
    soft_dim: int = 16
    num_mixtures: int = 64
    num_classes: int = 0
    prefix_len: int = 16


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.text_embed = nn.Embedding(VOCAB_SIZE, w)
        self.soft_lift = nn.Linear(cfg.soft_dim, w)
        self.class_embed = nn.Parameter(torch.randn(max(cfg.num_classes, 1), cfg.prefix_len, w) / w**0.5)
        self.nolabel_embed = nn.Parameter(torch.randn(cfg.prefix_len, w) / w**0.5)
        self.blocks = nn.ModuleList(
            Block(w, cfg.heads, cfg.kv_heads, dropout=cfg.dropout) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(w)
        self.gmm_head = nn.Linear(w, cfg.num_mixtures * (2 * cfg.soft_dim + 1))
        self.text_head = nn.Linear(w, VOCAB_SIZE)

    # -- embedding ---------------------------------------------------------

    def embed(self, batch: dict, soft: torch.Tensor | None) -> torch.Tensor:
        kind, tid, slot = batch["kind"], batch["token_id"], batch["slot"]
        is_text = (kind == TEXT) | (kind == BOUNDARY)
        if bool(((tid < 0) | (tid >= VOCAB_SIZE))[is_text].any()):
            raise IndexError("text token id outside the vocabulary")
        is_class = kind == CLASS
        if bool(((tid < 0) | (tid >= self.cfg.num_classes))[is_class].any()):
            raise IndexError("class id outside the configured classes")
        slot = slot.clamp(0, self.cfg.prefix_len - 1)
        h = torch.where(is_text[..., None], self.text_embed(torch.where(is_text, tid, 0)), 0.0)
        h = h + torch.where(is_class[..., None], self.class_embed[torch.where(is_class, tid, 0), slot], 0.0)
        h = h + torch.where((kind == NOLABEL)[..., None], self.nolabel_embed[slot], 0.0)
        if soft is not None:
            h = h + torch.where((kind == SOFT)[..., None], self.soft_lift(soft), 0.0)
        return h

    # -- teacher forcing ---------------------------------------------------

    def decode_teacher_forced(self, batch: dict, soft: torch.Tensor | None) -> BackboneOutput:
        kind = batch["kind"]
        h = self.embed(batch, soft)
        rope = rope_tables(batch["position_ids"].clamp_min(0), self.blocks[0].attn.head_dim) if self.blocks else None
        mask = attention_mask(kind)
        for block in self.blocks:
            h, _ = block(h, mask=mask, rope=rope)
        next_kind = torch.cat([kind[:, 1:], torch.full_like(kind[:, :1], PAD)], dim=1)
        return BackboneOutput(self.norm(h), next_kind)

    def gmm_params(self, hidden: torch.Tensor) -> GmmParams:
        return GmmParams.from_head(self.gmm_head(hidden), self.cfg.num_mixtures, self.cfg.soft_dim)

    def text_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.text_head(hidden)

    # -- incremental decoding ----------------------------------------------

    def _step(self, h, positions, key_real, caches):
        """Run new tokens h [B, n, w] at ``positions`` [B, n] against cached keys."""
        n = h.shape[1]
        s = key_real.shape[1]
        # queries are the last n keys; causal within the new block
        q_idx = torch.arange(s - n, s)
        mask = (torch.arange(s)[None, :] <= q_idx[:, None])[None] & key_real[:, None, :]
        mask = mask | (torch.arange(s)[None, :] == q_idx[:, None])[None]
        rope = rope_tables(positions.clamp_min(0), self.blocks[0].attn.head_dim) if self.blocks else None
        new = []
        for block, cache in zip(self.blocks, caches):
            h, c = block(h, mask=mask, rope=rope, cache=cache)
            new.append(c)
        return self.norm(h), new

    def start(self, prefix: dict, soft: torch.Tensor | None = None):
        """Encode a prefix batch; returns (last hidden [B, w], decoding state)."""
        kind = prefix["kind"]
        h = self.embed(prefix, soft)
        key_real = kind != PAD
        out, caches = self._step(h, prefix["position_ids"], key_real, [None] * len(self.blocks))
        last_pos = prefix["position_ids"].max(dim=1).values
        last = kind.shape[1] - 1
        return out[:, last], {"caches": caches, "key_real": key_real, "pos": last_pos}

    def advance(self, state: dict, token_embedding: torch.Tensor):
        """Append one token embedding [B, w]; returns (hidden [B, w], new state)."""
        b = token_embedding.shape[0]
        pos = state["pos"] + 1
        key_real = torch.cat([state["key_real"], torch.ones(b, 1, dtype=torch.bool)], dim=1)
        out, caches = self._step(token_embedding[:, None], pos[:, None], key_real, state["caches"])
        return out[:, 0], {"caches": caches, "key_real": key_real, "pos": pos}


def prefix_batch(seqs: Sequence[PackedSequence]) -> dict:
    """Collate the conditioning part of each sequence (everything before the target span)."""
    cut = []
    for s in seqs:
        n = s.image_start if s.image_is_target else int(np.flatnonzero(s.kind == BOUNDARY)[0]) + 1
        cut.append(PackedSequence(s.kind[:n], s.token_id[:n], s.slot[:n], s.loss_mask[:n],
                                  s.position_ids[:n], s.direction, s.image_start, s.dropped))
    lengths = {len(s) for s in cut}
    if len(lengths) != 1:
        raise ValueError("prefixes in one generation batch must share a length")
    return collate(cut)


@torch.no_grad()
def generate_soft(model: Backbone, prefix: dict, n: int, generator: torch.Generator | None = None,
                  guidance: float | None = None, uncond_prefix: dict | None = None, candidates: int = 64,
                  tau_mix: float = 1.0, tau_scale: float = 1.0, use_cache: bool = True,
                  stats: dict | None = None) -> torch.Tensor:
    """Sample ``n`` soft tokens after ``prefix``; returns [B, n, d].

    With ``guidance`` set, an unconditional stream (``uncond_prefix``) runs in
    lockstep and each accepted token is fed to both streams.
    """
    b = prefix["kind"].shape[0]
    d = model.cfg.soft_dim
    if n == 0:
        return torch.zeros(b, 0, d)
    guided = guidance is not None
    if guided and uncond_prefix is None:
        raise ValueError("guided sampling needs an unconditional prefix")
    batch = _concat(prefix, uncond_prefix) if guided else prefix
    tokens = []

    def draw(hidden):
        params = model.gmm_params(hidden)
        if guided:
            return cfg_sample(params.index(slice(0, b)), params.index(slice(b, None)), guidance,
                              generator, candidates, tau_mix, tau_scale, stats)
        return gmm_sample(params, generator, tau_mix, tau_scale)

    if use_cache:
        hidden, state = model.start(batch)
        for i in range(n):
            z = draw(hidden)
            tokens.append(z)
            if i + 1 < n:
                zz = torch.cat([z, z]) if guided else z
                hidden, state = model.advance(state, model.soft_lift(zz))
    else:
        for i in range(n):
            seq = _append_soft(batch, tokens, guided)
            out = model.decode_teacher_forced(seq["batch"], seq["soft"])
            tokens.append(draw(out.hidden[:, -1]))
    return torch.stack(tokens, dim=1)


def _concat(a: dict, b: dict) -> dict:
    return {k: torch.cat([a[k], b[k]]) for k in a}


def _append_soft(prefix: dict, tokens: list, guided: bool) -> dict:
    """Full sequence = prefix + generated soft tokens (used by the uncached path)."""
    b, p = prefix["kind"].shape
    n = len(tokens)
    batch = dict(prefix)
    batch["kind"] = torch.cat([prefix["kind"], torch.full((b, n), SOFT)], dim=1)
    batch["token_id"] = torch.cat([prefix["token_id"], torch.zeros(b, n, dtype=torch.int64)], dim=1)
    batch["slot"] = torch.cat([prefix["slot"], torch.zeros(b, n, dtype=torch.int64)], dim=1)
    batch["loss_mask"] = torch.cat([prefix["loss_mask"], torch.zeros(b, n, dtype=torch.bool)], dim=1)
    last = prefix["position_ids"].max(dim=1, keepdim=True).values
    batch["position_ids"] = torch.cat([prefix["position_ids"], last + 1 + torch.arange(n)[None]], dim=1)
    if n:
        z = torch.stack(tokens, dim=1)
        z = torch.cat([z, z]) if guided else z
        soft = torch.cat([torch.zeros(b, p, z.shape[-1], dtype=z.dtype), z], dim=1)
    else:
        soft = None
    return {"batch": batch, "soft": soft}


@torch.no_grad()
def generate_text(model: Backbone, prefix: dict, soft: torch.Tensor | None, max_len: int,
                  greedy: bool = True, generator: torch.Generator | None = None) -> list[list[int]]:
    """Decode text after an image prefix (``soft`` = prefix soft tokens [B, P, d]).

    Stops per example at EOS (not included in the output) or after ``max_len`` tokens.
    """
    b = prefix["kind"].shape[0]
    if max_len == 0:
        return [[] for _ in range(b)]
    hidden, state = model.start(prefix, soft)
    result = [[] for _ in range(b)]
    done = torch.zeros(b, dtype=torch.bool)
    for _ in range(max_len):
        logits = model.text_logits(hidden).to(torch.float64)
        if greedy:
            nxt = logits.argmax(-1)
        else:
            nxt = torch.multinomial(torch.softmax(logits, -1), 1, generator=generator)[:, 0]
        for i in range(b):
            if not done[i]:
                if int(nxt[i]) == EOS:
                    done[i] = True
                else:
                    result[i].append(int(nxt[i]))
        if bool(done.all()):
            break
        hidden, state = model.advance(state, model.text_embed(nxt))
    return result
