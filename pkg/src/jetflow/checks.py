"""Numerical oracle suites: finite-difference Jacobians and gradients, round trips,
naive mixture densities and grid-normalized guidance targets.

Each suite returns a list of :class:`CheckResult`; ``jetflow check`` prints them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy import integrate, stats

from .backbone import collate
from .config import RunConfig
from .data import TEXT, SequenceLayout, pack_example
from .flow import Flow, randomize_
from .gmm import GmmParams, cfg_sample, gmm_nll, gmm_sample
from .model import JetFormer


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tol:.1e}, {self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# flow


def fd_jacobian(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector map, float64."""
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def random_flow(channels: int, tokens: int, depth: int = 2, seed: int = 0, width: int = 16,
                block_depth: int = 1, heads: int = 2, dtype=torch.float64, scale: float = 0.5) -> Flow:
    torch.manual_seed(seed)
    flow = Flow(channels, tokens, depth=depth, width=width, block_depth=block_depth, heads=heads, seed=seed)
    flow = flow.to(dtype)
    randomize_(flow, scale=scale, generator=torch.Generator().manual_seed(seed))
    return flow


def logdet_error(flow: Flow, tokens: int, channels: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 64, tokens * channels)

    def f(v):
        with torch.no_grad():
            return flow(torch.from_numpy(v).reshape(1, tokens, channels)).latents.numpy().ravel()

    with torch.no_grad():
        analytic = float(flow(torch.from_numpy(x).reshape(1, tokens, channels)).logdet[0])
    _, numeric = np.linalg.slogdet(fd_jacobian(f, x, h=1e-4))
    return abs(analytic - numeric) / abs(numeric)


def check_jacobian(draws: int = 20, tol: float = 1e-3) -> list[CheckResult]:
    out = []
    for dims, (tokens, channels) in ((8, (2, 4)), (12, (1, 12)), (16, (2, 8))):
        t0 = time.time()
        worst = 0.0
        for s in range(draws):
            flow = random_flow(channels, tokens, depth=2, seed=1000 * dims + s)
            worst = max(worst, logdet_error(flow, tokens, channels, seed=s))
        out.append(CheckResult(f"logdet vs finite-difference slogdet, D={dims}, {draws} draws",
                               worst, tol, worst < tol, time.time() - t0))
    return out


def check_invert(n: int = 256) -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 256, (n, 16, 48)) - 128.0
    for dtype, tol in ((torch.float32, 1e-3), (torch.float64, 1e-8)):
        t0 = time.time()
        flow = random_flow(48, 16, depth=8, width=64, block_depth=2, heads=4, seed=3, dtype=dtype, scale=0.5)
        xt = torch.from_numpy(x).to(dtype)
        with torch.no_grad():
            err = float((flow.inverse(flow(xt).latents) - xt).abs().max())
        name = str(dtype).replace("torch.", "")
        out.append(CheckResult(f"round trip 16x16x3, {n} inputs, {name}", err, tol, err < tol, time.time() - t0))
    return out


# ---------------------------------------------------------------------------
# end-to-end gradient


def micro_config(**overrides) -> RunConfig:
    base = dict(image_size=4, patch_size=2, label_kind="caption", max_text_len=4, prefix_len=4,
                factor_mode="pre_flow_linear", factor_dim=4, factor_init="random_orthogonal",
                flow_depth=2, flow_width=16, flow_block_depth=1, flow_heads=2,
                width=16, depth=2, heads=2, kv_heads=1, num_mixtures=4, dropout=0.0,
                jitter_std=0.3, seed=0)
    base.update(overrides)
    return RunConfig(**base)


def micro_model_and_batch(cfg: RunConfig | None = None, seed: int = 0):
    """Float64 micro model with randomized flow heads plus a mixed-direction batch."""
    cfg = cfg or micro_config()
    torch.manual_seed(seed)
    model = JetFormer(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    for block in model.flow.blocks:
        randomize_(block.predictor.head, scale=0.5, generator=gen)
    if model.linear is not None:
        with torch.no_grad():
            model.linear.weight.add_(0.1 * torch.randn(model.linear.weight.shape, generator=gen, dtype=torch.float64))
    rng = np.random.default_rng(seed)
    layout = SequenceLayout(cfg.tokens_per_image, cfg.label_kind, cfg.max_text_len, cfg.prefix_len,
                            cond_drop=0.0, num_classes=cfg.num_classes)
    captions = [b"ab", b"xyz", b"q", b"hi!"]
    directions = ["text_then_image", "text_then_image", "image_then_text", "image_then_text"]
    batch = collate([pack_example(c, d, layout, rng) for c, d in zip(captions, directions)])
    # near mid-gray so the Gaussian tail stays O(1) and differences are not swamped by round-off
    images = torch.from_numpy(rng.uniform(120, 136, (4, cfg.image_size, cfg.image_size, 3)))
    return model, images, batch


def total_loss_fn(model, images, batch, jitter_seed: int = 5):
    def fn():
        gen = torch.Generator().manual_seed(jitter_seed)
        return model.loss(images, batch, gen)[0]
    return fn


def gradient_errors(model, loss_fn, groups: dict[str, list[str]], per_group: int = 4, h: float = 1e-4,
                    seed: int = 0):
    """Relative errors between autograd and central differences at sampled coordinates.

    Error per coordinate is |g - fd| / (|fd| + 1e-6); the floor keeps round-off
    on near-zero gradients from dominating.
    """
    model.train()
    params = dict(model.named_parameters())
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for group, names in groups.items():
        errs = []
        for _ in range(per_group):
            name = names[rng.integers(len(names))]
            p = params[name]
            i = np.unravel_index(int(rng.integers(p.numel())), tuple(p.shape))
            flat = p.data
            g = float(p.grad[i])
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            errs.append(abs(g - fd) / (abs(fd) + 1e-6))
        worst[group] = max(errs)
    return worst


def parameter_groups(model: JetFormer) -> dict[str, list[str]]:
    names = [n for n, _ in model.named_parameters()]
    groups = {
        "flow": [n for n in names if n.startswith("flow.")],
        "linear W": [n for n in names if n.startswith("linear.")],
        "backbone": [n for n in names if n.startswith("backbone.blocks.") or n.startswith("backbone.soft_lift")],
        "gmm head": [n for n in names if n.startswith("backbone.gmm_head")],
        "text head": [n for n in names if n.startswith("backbone.text_head")],
    }
    return {k: v for k, v in groups.items() if v}


def check_gradcheck(tol: float = 1e-4, per_group: int = 16) -> list[CheckResult]:
    t0 = time.time()
    # The image-prefix stop-gradient deliberately hides part of the true derivative,
    # which finite differences would still see; compare with it switched off.
    model, images, batch = micro_model_and_batch(micro_config(stop_gradient_image_prefix=False))
    worst = gradient_errors(model, total_loss_fn(model, images, batch), parameter_groups(model), per_group)
    secs = time.time() - t0
    return [CheckResult(f"total-loss gradient vs central differences, {g}", e, tol, e < tol, secs)
            for g, e in worst.items()]


# ---------------------------------------------------------------------------
# mixture head


def naive_mixture_nll(logits, means, scales, target) -> float:
    """-log sum_k w_k prod_j N(t_j; mu_kj, s_kj), by direct summation."""
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    total = 0.0
    for k in range(len(w)):
        dens = 1.0
        for j in range(len(target)):
            z = (target[j] - means[k, j]) / scales[k, j]
            dens *= math.exp(-0.5 * z * z) / (scales[k, j] * math.sqrt(2 * math.pi))
        total += w[k] * dens
    return -math.log(total)


def check_gmm(pairs: int = 1000, tol: float = 1e-8) -> list[CheckResult]:
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(pairs):
        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        logits = rng.normal(0, 1, k)
        means = rng.normal(0, 1, (k, d))
        log_scales = rng.uniform(-1, 1, (k, d))
        target = rng.normal(0, 1.5, d)
        params = GmmParams(*(torch.from_numpy(a) for a in (logits, means, log_scales)))
        got = float(gmm_nll(params, torch.from_numpy(target)))
        want = naive_mixture_nll(logits, means, np.exp(log_scales), target)
        worst = max(worst, abs(got - want) / abs(want))
    res = [CheckResult(f"gmm_nll vs naive density sum, {pairs} pairs", worst, tol, worst < tol, time.time() - t0)]

    t0 = time.time()
    params = GmmParams(torch.tensor([0.3, -0.2, 0.5], dtype=torch.float64),
                       torch.tensor([[-2.0], [0.5], [3.0]], dtype=torch.float64),
                       torch.tensor([[-0.5], [0.2], [-1.0]], dtype=torch.float64))
    grid = torch.linspace(-15, 15, 200001, dtype=torch.float64)
    dens = torch.exp(-gmm_nll(params, grid[:, None])).numpy()
    mass = float(integrate.trapezoid(dens, grid.numpy()))
    res.append(CheckResult("d=1 density integrates to 1", abs(mass - 1), 1e-3, abs(mass - 1) < 1e-3, time.time() - t0))
    return res


# ---------------------------------------------------------------------------
# guidance


def guided_test_mixtures():
    cond = GmmParams(torch.tensor([0.0, 0.0], dtype=torch.float64),
                     torch.tensor([[-1.0], [1.5]], dtype=torch.float64),
                     torch.log(torch.tensor([[0.7], [0.8]], dtype=torch.float64)))
    uncond = GmmParams(torch.tensor([0.0, 0.0], dtype=torch.float64),
                       torch.tensor([[-0.5], [0.5]], dtype=torch.float64),
                       torch.log(torch.tensor([[1.2], [1.5]], dtype=torch.float64)))
    return cond, uncond


def guided_cdf(cond: GmmParams, uncond: GmmParams, guidance: float, lo=-15.0, hi=15.0, n=300001):
    """Grid-normalized CDF of p_c^(1+g) p_u^(-g) for 1-D mixtures."""
    grid = torch.linspace(lo, hi, n, dtype=torch.float64)
    log_dens = -(1 + guidance) * gmm_nll(cond, grid[:, None]) + guidance * gmm_nll(uncond, grid[:, None])
    dens = torch.exp(log_dens - log_dens.max()).numpy()
    cdf = integrate.cumulative_trapezoid(dens, grid.numpy(), initial=0.0)
    cdf /= cdf[-1]
    xs = grid.numpy()
    return lambda v: np.interp(v, xs, cdf)


def guided_samples(cond, uncond, guidance, n, candidates, seed=0, chunk=1000):
    gen = torch.Generator().manual_seed(seed)
    out = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        c, u = cond.expand(m), uncond.expand(m)
        out.append(cfg_sample(c, u, guidance, gen, candidates)[:, 0])
    return torch.cat(out).numpy()


def check_cfg(n: int = 100_000, candidates: int = 1024, guidance: float = 2.0, tol: float = 0.05):
    cond, uncond = guided_test_mixtures()
    t0 = time.time()
    a = gmm_sample(cond.expand(64), torch.Generator().manual_seed(9))
    b = cfg_sample(cond.expand(64), uncond.expand(64), 0.0, torch.Generator().manual_seed(9), candidates)
    same = bool(torch.equal(a, b))
    res = [CheckResult("guidance 0 is bit-identical to plain sampling", 0.0 if same else 1.0, 0.0, same,
                       time.time() - t0)]
    t0 = time.time()
    xs = guided_samples(cond, uncond, guidance, n, candidates)
    ks = stats.kstest(xs, guided_cdf(cond, uncond, guidance)).statistic
    res.append(CheckResult(f"guided sampling KS vs grid-normalized target, lambda={guidance}, K={candidates}",
                           float(ks), tol, ks < tol, time.time() - t0))
    return res



# ---------------------------------------------------------------------------
# loss masking


def masked_target_invariance(seed: int = 0) -> float:
    """Largest change in the total loss when every non-target position is rewritten.

    The decoder's hidden states are frozen first, so the rewritten values can
    only act as prediction targets: text ids outside the loss mask are replaced
    by random bytes, and the pixels of image-then-text examples (whose latents
    are the masked soft-token targets) are redrawn. A correct mask gives 0.0.
    """
    cfg = micro_config(max_text_len=6, jitter_std=0.0)
    model, images, _ = micro_model_and_batch(cfg, seed)
    model.eval()
    rng = np.random.default_rng(seed)
    layout = SequenceLayout(cfg.tokens_per_image, cfg.label_kind, cfg.max_text_len, cfg.prefix_len,
                            cond_drop=0.5, num_classes=cfg.num_classes)
    caps = [b"red", b"ab", b"", b"tiny"]
    batch = collate([pack_example(c, d, layout, rng) for c, d in
                     zip(caps, ["text_then_image", "image_then_text", "text_then_image", "image_then_text"])])
    original = model.backbone.decode_teacher_forced
    cache = {}

    def fixed(b, soft):
        if "out" not in cache:
            cache["out"] = original(b, soft)
        return cache["out"]

    worst = 0.0
    try:
        model.backbone.decode_teacher_forced = fixed
        with torch.no_grad():
            base = model.loss(images, batch)[0]
            for _ in range(8):
                mutated = {k: v.clone() for k, v in batch.items()}
                # first-modality text: the caption of a text-then-image example
                free = (mutated["kind"] == TEXT) & batch["image_is_target"][:, None]
                mutated["token_id"][free] = torch.from_numpy(rng.integers(0, 256, int(free.sum())))
                new_images = images.clone()
                prefix_img = ~batch["image_is_target"]
                new_images[prefix_img] = torch.from_numpy(
                    rng.uniform(0, 256, tuple(new_images[prefix_img].shape))).to(images.dtype)
                worst = max(worst, abs(float(model.loss(new_images, mutated)[0] - base)))
    finally:
        model.backbone.decode_teacher_forced = original
    return worst


SUITES = {
    "jacobian": check_jacobian,
    "gradcheck": check_gradcheck,
    "invert": check_invert,
    "gmm": check_gmm,
    "cfg": check_cfg,
}
