"""Command-line entry point: ``jetflow {synth,train,eval,sample,check}``.

Exit codes: 0 success, 1 numeric failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_value
from .data import DatasetFile, DatasetFormatError, OverlongCaptionError, SynthShapesSpec, synth_shapes
from .model import NonFiniteLossError

log = logging.getLogger("jetflow")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads():
    n = os.environ.get("JETFLOW_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _overrides(pairs) -> dict:
    types = {f.name: f.type for f in RunConfig.__dataclass_fields__.values()}
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = parse_value(types[key], val, key)
    return out


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthShapesSpec(count=args.count, size=args.size, captions=args.captions, seed=args.seed)
    data = synth_shapes(spec)
    data.write(args.out)
    print(f"wrote {len(data)} images ({data.label_kind}, {data.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .engine import Trainer

    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    out = Path(args.out)
    if args.resume is None and out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty; pass --resume to continue a run")
    if args.resume is not None:
        from .checkpoint import load_checkpoint

        _, snap, _ = load_checkpoint(args.resume)
        cfg = RunConfig.from_dict({**snap, **overrides})
    else:
        if args.config is None:
            raise UsageError("--config is required unless --resume is given")
        cfg = RunConfig.load(args.config, overrides)
    if not cfg.data or not Path(cfg.data).is_file():
        raise UsageError(f"dataset not found: {cfg.data!r}")
    data = DatasetFile.read(cfg.data)

    out.mkdir(parents=True, exist_ok=True)
    if args.resume is not None:
        trainer = Trainer.resume(args.resume, data)
    else:
        trainer = Trainer(cfg, data)
    trainer.cfg.save(out / "config.txt")

    def report(tr, row):
        if tr.step % 100 == 0 or tr.step == tr.cfg.steps:
            log.info("step %d  bpd %.4f  text %.4f  sigma %.2f  |g| %.3f", row["step"], row["image_bpd"],
                     row["text_nll"], row["sigma_t"], row["grad_norm"])

    trainer.train(metrics_path=out / "metrics.csv", checkpoint_dir=out, callback=report)
    trainer.save(out / "final.jfck")
    print(f"trained {trainer.step} steps; final checkpoint {out / 'final.jfck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .engine import evaluate_bpd, load_model

    data = DatasetFile.read(args.data)
    if args.uniform_reference:
        bpd = evaluate_bpd(None, data)
    else:
        model = load_model(args.ckpt)
        cfg = model.cfg
        if data.height != cfg.image_size or data.width != cfg.image_size or data.label_kind != cfg.label_kind:
            raise CheckpointError("dataset does not match the checkpoint configuration")
        bpd = evaluate_bpd(model, data, args.label_mode, seed=args.seed)
    print(f"bpd={bpd:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .engine import load_model, resample_latents, sample_images
    from .ppm import read_ppm, write_ppm

    model = load_model(args.ckpt)
    cfg = model.cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    if args.resample_gaussian_latents:
        image = read_ppm(args.resample_gaussian_latents)
        for i in range(args.n):
            img = resample_latents(model, image, "gaussian", seed=args.seed + i, temperature=args.temp)
            name = f"resample_{i:04d}.ppm"
            write_ppm(out / name, img)
            lines.append(f"{name}\tresample-gaussian-latents\tsource={args.resample_gaussian_latents}\tseed={args.seed + i}")
    else:
        if args.class_id is not None:
            if cfg.label_kind != "class" or not 0 <= args.class_id < cfg.num_classes:
                raise UsageError(f"unknown class {args.class_id}")
            cond, desc = args.class_id, f"class={args.class_id}"
        elif args.prompt is not None:
            if cfg.label_kind != "caption":
                raise UsageError("this checkpoint was not trained on captions")
            if len(args.prompt.encode()) > cfg.max_text_len:
                raise UsageError(f"prompt longer than {cfg.max_text_len} bytes")
            cond, desc = args.prompt, f"prompt={args.prompt!r}"
        else:
            cond, desc = None, "unconditional"
        stats = {}
        images = sample_images(model, cond, args.n, guidance=args.cfg, temperature=args.temp, seed=args.seed,
                               candidates=cfg.cfg_candidates, stats=stats)
        for i, img in enumerate(images):
            name = f"sample_{i:04d}.ppm"
            write_ppm(out / name, img)
            lines.append(f"{name}\t{desc}\tcfg={args.cfg}\ttemp={args.temp}\tseed={args.seed}")
        if stats.get("cfg_degenerate"):
            log.warning("guided sampling fell back to uniform picks %d times", stats["cfg_degenerate"])
    (out / "index.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} images to {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import SUITES

    ok = True
    for result in SUITES[args.suite]():
        print(result.line())
        ok &= result.passed
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jetflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4096)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--captions", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="held-out bits per dimension")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--label-mode", default="matched", choices=["matched", "mismatched", "unconditional"])
    e.add_argument("--uniform-reference", action="store_true", help="score the uniform density instead")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("sample", help="generate P6 images")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--n", type=int, default=4)
    g = m.add_mutually_exclusive_group()
    g.add_argument("--class", dest="class_id", type=int)
    g.add_argument("--prompt")
    m.add_argument("--cfg", type=float, default=4.0, help="guidance strength (default 4.0)")
    m.add_argument("--temp", type=float, default=1.0, help="std of the factored-out Gaussian dims")
    m.add_argument("--resample-gaussian-latents", metavar="IMG")
    m.add_argument("--out", default="samples")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_sample)

    c = sub.add_parser("check", help="run a numerical oracle suite")
    c.add_argument("--suite", required=True, choices=["jacobian", "gradcheck", "invert", "gmm", "cfg"])
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    _threads()
    torch.manual_seed(getattr(args, "seed", None) or 0)
    np.random.seed((getattr(args, "seed", None) or 0) % 2**32)
    try:
        if args.command == "eval" and not args.uniform_reference and not args.ckpt:
            raise UsageError("--ckpt is required unless --uniform-reference is given")
        return args.fn(args)
    except (UsageError, ConfigError, DatasetFormatError, CheckpointError, OverlongCaptionError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"jetflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"jetflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
