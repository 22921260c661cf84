"""Training, evaluation and sampling pipelines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import collate, generate_soft, generate_text, prefix_batch, scatter_soft
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .curriculum import apply_rgb_noise, dequantize, noise_sigma
from .data import DatasetFile, flip_left_right, pack_example
from .factoring import CONDITION_WARNING, pca_init
from .model import LN2, JetFormer

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "sigma_t", "image_bpd", "ar_nll", "gaussian_nll", "logdet",
                  "volume_term", "text_nll", "grad_norm", "lr"]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and global gradient-norm clipping.

    Decay is applied as ``p <- p * (1 - schedule * weight_decay)``, i.e. scaled
    by the learning-rate schedule multiplier but not by the peak learning rate.
    """

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=1e-4,
                 clip=1.0, no_decay=()):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.decay = {n: p.ndim >= 2 and not any(n.startswith(x) for x in no_decay) for n, p in self.params}
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}
        self.t = 0

    def clip_gradients(self) -> float:
        grads = [p.grad for _, p in self.params if p.grad is not None]
        norm = torch.sqrt(sum(g.to(torch.float64).square().sum() for g in grads)) if grads else torch.tensor(0.0)
        norm = float(norm)
        if self.clip and norm > self.clip:
            for g in grads:
                g.mul_(self.clip / norm)
        return norm

    @torch.no_grad()
    def step(self, multiplier: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * multiplier
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[n], self.v[n]
            m.mul_(b1).add_(p.grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
            if self.decay[n] and self.weight_decay:
                p.mul_(1 - multiplier * self.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.eps), value=-lr)

    def state_tensors(self) -> dict:
        out = {f"opt.m.{n}": t for n, t in self.m.items()}
        out.update({f"opt.v.{n}": t for n, t in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict, t: int) -> None:
        for n in self.m:
            self.m[n].copy_(tensors[f"opt.m.{n}"])
            self.v[n].copy_(tensors[f"opt.v.{n}"])
        self.t = t


def lr_multiplier(step: int, total: int, warmup_frac: float = 0.02, min_frac: float = 0.1) -> float:
    """Linear warmup, then cosine decay to ``min_frac`` of the peak."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return (step + 1) / warm
    prog = min(1.0, (step - warm) / max(1, total - warm))
    return min_frac + (1 - min_frac) * 0.5 * (1 + math.cos(math.pi * prog))


# ---------------------------------------------------------------------------
# batches


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    start = step * batch_size
    out, cache = [], {}
    for g in range(start, start + batch_size):
        epoch, pos = divmod(g, n)
        if epoch not in cache:
            cache[epoch] = epoch_order(n, seed, epoch)
        out.append(cache[epoch][pos])
    return np.asarray(out)


def training_batch(data: DatasetFile, idx: np.ndarray, step: int, cfg: RunConfig, layout, sigma: float):
    """Augment, noise, dequantize and pack one batch; every draw is keyed by (seed, step, slot)."""
    images, seqs = [], []
    for slot, i in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, step, slot, 1])
        img = data.images[i]
        if cfg.flip and data.label_kind == "class":
            img = flip_left_right(img, rng)
        img = apply_rgb_noise(img, sigma, rng)
        images.append(dequantize(img, rng))
        label = data.labels[i] if data.label_kind != "none" else None
        seqs.append(pack_example(label, cfg.direction, layout, rng))
    return torch.from_numpy(np.stack(images)).float(), collate(seqs)


# ---------------------------------------------------------------------------
# training


def build_model(cfg: RunConfig, data: DatasetFile | None = None) -> JetFormer:
    torch.manual_seed(cfg.seed)
    pca = None
    if cfg.factor_mode == "pre_flow_linear" and cfg.factor_init == "pca":
        if data is None:
            raise ValueError("pca init needs training images")
        rng = np.random.default_rng([cfg.seed, 3])
        take = rng.permutation(len(data))[: min(len(data), 4000)]
        pca = pca_init(dequantize(data.images[take], rng), cfg.patch_size)
    return JetFormer(cfg, pca_matrix=pca)


class Trainer:
    def __init__(self, cfg: RunConfig, data: DatasetFile, model: JetFormer | None = None):
        if data.label_kind != cfg.label_kind or data.num_classes != cfg.num_classes:
            cfg = cfg.replace(label_kind=data.label_kind, num_classes=data.num_classes)
        if data.height != cfg.image_size or data.width != cfg.image_size:
            raise ValueError(f"dataset images are {data.height}x{data.width}, config expects {cfg.image_size}")
        self.cfg = cfg
        self.data = data
        self.model = model if model is not None else build_model(cfg, data)
        self.layout = self.model.layout
        self.opt = AdamW(self.model.named_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                         weight_decay=cfg.weight_decay, clip=cfg.grad_clip, no_decay=("linear.",))
        self.step = 0
        self.last_grad_norm = 0.0

    def sigma_at(self, step: int) -> float:
        return noise_sigma(min(1.0, step / max(1, self.cfg.steps)), self.cfg.sigma0, self.cfg.sigma_end)

    def train_step(self) -> dict:
        cfg, step = self.cfg, self.step
        sigma = self.sigma_at(step)
        idx = batch_indices(len(self.data), cfg.batch_size, step, cfg.seed)
        images, batch = training_batch(self.data, idx, step, cfg, self.layout, sigma)
        self.model.train()
        torch.manual_seed(derive_seed(cfg.seed, step, 2))  # dropout stream
        jitter = torch.Generator().manual_seed(derive_seed(cfg.seed, step, 3))
        total, breakdown = self.model.loss(images, batch, jitter)
        for _, p in self.opt.params:
            p.grad = None
        total.backward()
        grad_norm = self.opt.clip_gradients()
        mult = lr_multiplier(step, cfg.steps, cfg.warmup_frac, cfg.min_lr_frac)
        self.opt.step(mult)
        self.step += 1
        self.last_grad_norm = grad_norm
        if self.model.linear is not None and self.model.linear.condition_number() > CONDITION_WARNING:
            log.warning("step %d: linear map condition number above %.0e", step, CONDITION_WARNING)
        return {
            "step": step, "sigma_t": sigma, "image_bpd": breakdown.image_bpd, "ar_nll": breakdown.ar_nll,
            "gaussian_nll": breakdown.gaussian_nll, "logdet": breakdown.logdet,
            "volume_term": breakdown.volume_term, "text_nll": breakdown.text_nll_per_token,
            "grad_norm": grad_norm, "lr": cfg.lr * mult, "breakdown": breakdown,
        }

    def train(self, steps: int | None = None, metrics_path=None, checkpoint_dir=None, callback=None):
        """Run until ``steps`` (default: cfg.steps) total steps have been taken."""
        end = self.cfg.steps if steps is None else steps
        fh = writer = None
        if metrics_path is not None:
            new = not Path(metrics_path).exists() or self.step == 0
            fh = open(metrics_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRIC_COLUMNS)
        try:
            while self.step < end:
                row = self.train_step()
                if writer:
                    writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                if callback:
                    callback(self, row)
                if checkpoint_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"ckpt_{self.step:06d}.jfck")
        finally:
            if fh:
                fh.close()
        return self

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update(self.opt.state_tensors())
        meta = {"step": self.step, "opt_t": self.opt.t, "rng": {"seed": self.cfg.seed, "step": self.step}}
        save_checkpoint(path, tensors, self.cfg.to_dict(), meta)

    @classmethod
    def resume(cls, path, data: DatasetFile) -> "Trainer":
        tensors, config, meta = load_checkpoint(path)
        cfg = RunConfig.from_dict(config)
        model = JetFormer(cfg)
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        trainer = cls(cfg, data, model)
        trainer.opt.load_state_tensors(tensors, meta["opt_t"])
        trainer.step = meta["step"]
        return trainer


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_model(path) -> JetFormer:
    tensors, config, _ = load_checkpoint(path)
    cfg = RunConfig.from_dict(config)
    model = JetFormer(cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluation


UNIFORM_BPD = math.log(256) / LN2


def uniform_bpd() -> float:
    """bits/dim of the uniform density on [0, 256)^D: exactly 8."""
    return UNIFORM_BPD


def eval_labels(data: DatasetFile, mode: str, seed: int):
    """Labels for evaluation: true ones, shifted to a different class, or none."""
    if mode == "unconditional" or data.label_kind == "none":
        return [None] * len(data)
    if mode == "matched":
        return list(data.labels)
    if mode != "mismatched":
        raise ValueError(f"unknown label mode {mode!r}")
    rng = np.random.default_rng([seed, 11])
    if data.label_kind == "class":
        shift = rng.integers(1, data.num_classes, len(data))
        return list((data.labels + shift) % data.num_classes)
    # captions: derangement by cyclic shift of a random permutation
    perm = rng.permutation(len(data))
    shifted = np.roll(perm, 1)
    out = [None] * len(data)
    for a, b in zip(perm, shifted):
        out[a] = data.labels[b]
    return out


@torch.no_grad()
def per_example_bpd(model: JetFormer, data: DatasetFile, label_mode: str = "matched", seed: int = 0,
                    batch_size: int = 128) -> np.ndarray:
    """Image bits/dim per example: no noise curriculum, no jitter, one dequantization draw."""
    model.eval()
    layout = model.layout
    layout.cond_drop = 0.0
    labels = eval_labels(data, label_mode, seed)
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(len(data), start + batch_size))
        images, seqs = [], []
        for i in idx:
            rng = np.random.default_rng([seed, int(i), 5])
            images.append(dequantize(data.images[i], rng))
            if labels[i] is None and model.cfg.label_kind != "none":
                seq = _unconditional_sequence(layout, rng)
            else:
                seq = pack_example(labels[i], "text_then_image", layout, rng)
            seqs.append(seq)
        x = torch.from_numpy(np.stack(images)).float()
        terms = model.per_example_terms(x, collate(seqs))
        out.append(terms["image_bpd"].numpy())
    return np.concatenate(out)


def _unconditional_sequence(layout, rng):
    forced = type(layout)(**{**asdict(layout), "cond_drop": 1.0})
    label = 0 if layout.label_kind == "class" else b""
    return pack_example(label, "text_then_image", forced, rng)


def evaluate_bpd(model: JetFormer | None, data: DatasetFile, label_mode: str = "matched", seed: int = 0,
                 batch_size: int = 128) -> float:
    """Mean held-out bits/dim; ``model=None`` evaluates the uniform reference density."""
    if model is None:
        return uniform_bpd()
    return float(per_example_bpd(model, data, label_mode, seed, batch_size).mean())


# ---------------------------------------------------------------------------
# sampling


def conditioning_prefix(model: JetFormer, conditioning, n: int) -> tuple[dict, dict]:
    """(conditional prefix, unconditional prefix) batches for ``n`` samples."""
    layout = model.layout
    layout.cond_drop = 0.0
    rng = np.random.default_rng(0)
    if conditioning is None:
        seq = _unconditional_sequence(layout, rng)
    else:
        if layout.label_kind == "class":
            conditioning = int(conditioning)
        seq = pack_example(conditioning, "text_then_image", layout, rng)
    uncond = _unconditional_sequence(layout, rng)
    return prefix_batch([seq] * n), prefix_batch([uncond] * n)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    arr = torch.nan_to_num(images.to(torch.float64), nan=0.0).numpy()
    return np.clip(np.floor(arr), 0, 255).astype(np.uint8)


@torch.no_grad()
def sample_images(model: JetFormer, conditioning=None, n: int = 1, guidance: float = 0.0,
                  temperature: float = 1.0, seed: int = 0, candidates: int = 64,
                  stats: dict | None = None) -> np.ndarray:
    """Generate ``n`` images [n, H, W, 3] uint8.

    ``conditioning`` is a class id, caption text/bytes, or ``None``.
    ``guidance > 0`` switches to guided sampling against the [NOLABEL] stream;
    ``temperature`` scales the std of the factored-out Gaussian dimensions.
    """
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    cond, uncond = conditioning_prefix(model, conditioning, n)
    t = model.cfg.tokens_per_image
    if guidance > 0 and conditioning is not None:
        z_hat = generate_soft(model.backbone, cond, t, gen, guidance=guidance, uncond_prefix=uncond,
                              candidates=candidates, stats=stats)
    else:
        z_hat = generate_soft(model.backbone, cond, t, gen)
    tail = torch.randn(n, t, model.tail_channels(), generator=gen, dtype=torch.float64).float() * temperature
    return to_uint8(model.decode(z_hat, tail))


@torch.no_grad()
def resample_latents(model: JetFormer, image: np.ndarray, which: str = "gaussian", seed: int = 0,
                     temperature: float = 1.0) -> np.ndarray:
    """Encode ``image``, redraw one group of latents, decode.

    ``which="gaussian"`` keeps the autoregressive tokens and redraws the
    factored-out dimensions from N(0, temperature^2); ``which="ar"`` keeps the
    factored dimensions and redraws the autoregressive tokens from N(0, 1) with
    matched per-channel moments (a baseline of equal size).
    """
    model.eval()
    rng = np.random.default_rng([seed, 13])
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(dequantize(image, rng)[None]).float()
    enc = model.encode(x)
    z_hat, z_tilde = enc["z_hat"], enc["z_tilde"]
    if which == "gaussian":
        z_tilde = torch.randn(z_tilde.shape, generator=gen, dtype=torch.float64).float() * temperature
    elif which == "ar":
        mu = z_hat.mean(dim=1, keepdim=True)
        sd = z_hat.std(dim=1, keepdim=True)
        z_hat = mu + sd * torch.randn(z_hat.shape, generator=gen, dtype=torch.float64).float()
    else:
        raise ValueError(f"unknown latent group {which!r}")
    return to_uint8(model.decode(z_hat, z_tilde))[0]


@torch.no_grad()
def caption_images(model: JetFormer, images: np.ndarray, max_len: int | None = None, greedy: bool = True,
                   seed: int = 0) -> list[bytes]:
    """Greedy (or sampled) captions for uint8 images, using the flow as image encoder."""
    from .data import detokenize

    model.eval()
    layout = model.layout
    rng = np.random.default_rng([seed, 17])
    x = torch.from_numpy(np.stack([dequantize(im, rng) for im in images])).float()
    z = model.encode(x)["z_hat"]
    seq = pack_example(b"", "image_then_text", layout, rng)
    prefix = prefix_batch([seq] * len(images))
    soft = scatter_soft(z, prefix["image_start"], prefix["kind"].shape[1])
    gen = torch.Generator().manual_seed(seed)
    ids = generate_text(model.backbone, prefix, soft, max_len or model.cfg.max_text_len, greedy, gen)
    return [detokenize(i) for i in ids]

