"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly
(``python tests/test_acceptance.py``). Criteria 6 and 7 train two small
models for 5000 steps each and take roughly a quarter of an hour on a laptop CPU.
"""

from __future__ import annotations

import csv
import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from jetflow import checks
from jetflow.backbone import collate
from jetflow.config import RunConfig
from jetflow.curriculum import noise_sigma
from jetflow.data import SequenceLayout, SynthShapesSpec, pack_example, synth_shapes
from jetflow.engine import Trainer, evaluate_bpd, load_model, per_example_bpd, sample_images
from jetflow.model import JetFormer

# flow vs. no-flow comparison; identical except for flow_depth
MICRO = dict(flow_depth=4, flow_width=32, flow_block_depth=1, flow_heads=2, width=64, depth=2, heads=4,
             kv_heads=1, num_mixtures=32, batch_size=32, factor_mode="none", sigma0=16.0, steps=5000,
             checkpoint_every=0)


def report(number: int, title: str, passed: bool, detail: str, seconds: float) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {title}: {detail} ({seconds:.1f}s)"
    print(line, flush=True)
    return passed


# -- 1-5: numerical oracles ----------------------------------------------------


def criterion_1():
    t0 = time.time()
    res = checks.check_invert(256)
    ok = all(r.passed for r in res) and time.time() - t0 < 60
    detail = ", ".join(f"{r.name.split(', ')[-1]} max err {r.value:.2e} < {r.tol:.0e}" for r in res)
    return report(1, "invertibility", ok, detail, time.time() - t0)


def criterion_2():
    t0 = time.time()
    res = checks.check_jacobian(draws=20)
    ok = all(r.passed for r in res) and time.time() - t0 < 120
    detail = "worst rel err " + ", ".join(f"{r.name.split(', ')[1]}: {r.value:.1e}" for r in res)
    return report(2, "log-det exactness", ok, detail, time.time() - t0)


def criterion_3():
    t0 = time.time()
    res = checks.check_gradcheck(tol=1e-4)
    ok = all(r.passed for r in res) and time.time() - t0 < 300
    detail = ", ".join(f"{r.name.split(', ')[-1]} {r.value:.1e}" for r in res)
    return report(3, "end-to-end gradient check", ok, detail, time.time() - t0)


def criterion_4():
    t0 = time.time()
    res = checks.check_gmm(pairs=1000)
    ok = all(r.passed for r in res) and time.time() - t0 < 60
    detail = f"nll rel err {res[0].value:.1e} (tol 1e-8), |integral - 1| {res[1].value:.1e} (tol 1e-3)"
    return report(4, "GMM correctness", ok, detail, time.time() - t0)


def criterion_5():
    t0 = time.time()
    res = checks.check_cfg(n=100_000, candidates=1024, guidance=2.0)
    ok = all(r.passed for r in res) and time.time() - t0 < 120
    detail = f"lambda=0 max diff {res[0].value:.0e}, KS {res[1].value:.4f} (tol 0.05)"
    return report(5, "CFG correctness", ok, detail, time.time() - t0)


# -- 6-7: training sanity and conditioning signal --------------------------------


@functools.lru_cache(maxsize=1)
def shapes_split():
    full = synth_shapes(SynthShapesSpec(count=4096 + 512, size=16, seed=0))
    return full.subset(np.arange(4096)), full.subset(np.arange(4096, 4608))


@functools.lru_cache(maxsize=2)
def trained(flow_depth: int):
    train, _ = shapes_split()
    t0 = time.time()
    trainer = Trainer(RunConfig(**{**MICRO, "flow_depth": flow_depth}), train)
    trainer.train()
    return trainer.model, time.time() - t0


def criterion_6():
    t0 = time.time()
    _, held_out = shapes_split()
    flow_model, t_flow = trained(MICRO["flow_depth"])
    plain_model, t_plain = trained(0)
    bpd_flow = evaluate_bpd(flow_model, held_out, "matched")
    bpd_plain = evaluate_bpd(plain_model, held_out, "matched")
    secs = time.time() - t0
    ok = bpd_flow < 8.0 and bpd_flow <= bpd_plain - 0.1 and secs < 45 * 60
    detail = (f"held-out bpd {bpd_flow:.3f} with flow vs {bpd_plain:.3f} without "
              f"(gap {bpd_plain - bpd_flow:.3f}, need >= 0.1; training {t_flow:.0f}s + {t_plain:.0f}s)")
    return report(6, "training sanity", ok, detail, secs)


def criterion_7():
    t0 = time.time()
    _, held_out = shapes_split()
    model, _ = trained(MICRO["flow_depth"])
    matched = per_example_bpd(model, held_out, "matched")
    mismatched = per_example_bpd(model, held_out, "mismatched")
    margin = float(mismatched.mean() - matched.mean())
    ok = margin > 0
    detail = (f"matched {matched.mean():.4f} < mismatched {mismatched.mean():.4f} bpd "
              f"(margin {margin:.4f}; lower on {np.mean(matched < mismatched):.0%} of images)")
    return report(7, "conditioning signal", ok, detail, time.time() - t0)


# -- 8-11: mechanics ----------------------------------------------------------------


def tiny(**kw):
    base = dict(image_size=8, patch_size=4, flow_depth=2, flow_width=16, flow_block_depth=1, flow_heads=2,
                width=32, depth=2, heads=2, num_mixtures=4, factor_dim=8, batch_size=8, steps=12,
                checkpoint_every=0)
    base.update(kw)
    return RunConfig(**base)


@functools.lru_cache(maxsize=1)
def tiny_data():
    return synth_shapes(SynthShapesSpec(count=64, size=8, seed=5))


def criterion_8():
    t0 = time.time()
    grid = np.linspace(0, 1, 1000)
    sig = np.array([noise_sigma(t, 64.0, 0.0) for t in grid])
    ends = sig[0] == 64.0 and sig[-1] == 0.0
    monotone = bool(np.all(np.diff(sig) <= 0))
    with tempfile.TemporaryDirectory() as tmp:
        cfg = tiny(steps=50, sigma0=64.0, sigma_end=2.0)
        Trainer(cfg, tiny_data()).train(metrics_path=Path(tmp) / "m.csv")
        with open(Path(tmp) / "m.csv") as fh:
            rows = list(csv.DictReader(fh))
    closed = [2.0 + 62.0 * 0.5 * (1 + math.cos(math.pi * int(r["step"]) / 50)) for r in rows]
    err = max(abs(float(r["sigma_t"]) - c) for r, c in zip(rows, closed))
    ok = ends and monotone and err <= 1e-9 and len(rows) == 50
    detail = f"endpoints {sig[0]:g}->{sig[-1]:g}, monotone={monotone}, CSV vs closed form max err {err:.1e}"
    return report(8, "noise curriculum", ok, detail, time.time() - t0)


def criterion_9():
    t0 = time.time()
    delta = max(checks.masked_target_invariance(s) for s in range(4))
    rng = np.random.default_rng(0)
    lay_c = SequenceLayout(16, "caption", 16, 16, cond_drop=0.3)
    lay_k = SequenceLayout(16, "class", 16, 16, cond_drop=0.3, num_classes=9)
    bad = 0
    n = 0
    for i in range(2000):
        caption = rng.integers(97, 123, rng.integers(0, 17)).astype(np.uint8).tobytes()
        for seq in (pack_example(caption, "random", lay_c, rng), pack_example(int(i % 9), "random", lay_k, rng)):
            n += 1
            first_text = seq.direction == "image_then_text"
            target_kinds = set(seq.kind[seq.loss_mask].tolist())
            expected = {0} if first_text else {1}  # TEXT after an image, SOFT after a prefix
            span = seq.loss_mask.sum() == (len(caption) + 1 if first_text else 16)
            bad += target_kinds != expected or not span
    ok = delta == 0.0 and bad == 0
    detail = f"loss change under masked-target rewrites {delta!r}; {bad}/{n} sequences violate the second-modality rule"
    return report(9, "loss mask and second-modality rule", ok, detail, time.time() - t0)


def _loss(cfg, images, batch):
    torch.manual_seed(0)
    model = JetFormer(cfg).eval()
    with torch.no_grad():
        return model.loss(images, batch)


def criterion_10():
    t0 = time.time()
    base = dict(image_size=16, patch_size=4, label_kind="class", num_classes=9, flow_depth=2, flow_width=32,
                flow_block_depth=1, width=32, depth=2, num_mixtures=8)
    ref = RunConfig(**base, factor_mode="none")
    rng = np.random.default_rng(0)
    images = torch.from_numpy(rng.uniform(0, 256, (4, 16, 16, 3))).float()
    lay = SequenceLayout(ref.tokens_per_image, "class", cond_drop=0.0, num_classes=9)
    batch = collate([pack_example(c, "random", lay, rng) for c in (0, 3, 5, 8)])
    none_total, _ = _loss(ref, images, batch)
    pre_total, pre = _loss(RunConfig(**base, factor_mode="pre_flow_linear", factor_dim=48, factor_init="identity"),
                           images, batch)
    _, post = _loss(RunConfig(**base, factor_mode="post_flow", factor_dim=48), images, batch)
    _, flat = _loss(RunConfig(**{**base, "flow_depth": 0}, factor_mode="post_flow", factor_dim=16), images, batch)
    same = bool(torch.equal(none_total, pre_total))
    ok = same and pre.volume_term == 0.0 and post.gaussian_nll == 0.0 and flat.logdet == 0.0
    detail = (f"identity W d=C vs none bit-identical={same} ({float(pre_total):.6f}); "
              f"post-flow d=C gaussian_nll={post.gaussian_nll!r}; depth-0 logdet={flat.logdet!r}")
    return report(10, "reduction identities", ok, detail, time.time() - t0)


def criterion_11():
    t0 = time.time()
    data = tiny_data()
    cfg = tiny(steps=12, dropout=0.1, label_kind="class")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        full = Trainer(cfg, data)
        full.train()
        full.save(tmp / "full.jfck")
        before = evaluate_bpd(full.model, data, "matched", seed=3)
        after = evaluate_bpd(load_model(tmp / "full.jfck"), data, "matched", seed=3)

        half = Trainer(cfg, data)
        half.train(6)
        half.save(tmp / "mid.jfck")
        resumed = Trainer.resume(tmp / "mid.jfck", data)
        resumed.train()
        resumed.save(tmp / "resumed.jfck")
        same_resume = (tmp / "full.jfck").read_bytes() == (tmp / "resumed.jfck").read_bytes()

    a = sample_images(full.model, 4, n=3, guidance=4.0, seed=11)
    b = sample_images(full.model, 4, n=3, guidance=4.0, seed=11)
    same_samples = a.tobytes() == b.tobytes()
    ok = before == after and same_resume and same_samples
    detail = (f"eval bpd {before!r} vs reloaded {after!r}; resumed checkpoint byte-identical={same_resume}; "
              f"seeded samples byte-identical={same_samples}")
    return report(11, "reproducibility plumbing", ok, detail, time.time() - t0)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10, criterion_11]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i + 1}" for i in range(len(CRITERIA))])
def test_acceptance(criterion, capsys):
    with capsys.disabled():
        print()
        passed = criterion()
    assert passed


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
