"""Run configuration: one flat ``key = value`` text file.

Lines are ``key = value``; ``#`` starts a comment. Values are parsed according
to the field type below. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str = ""
    eval_data: str = ""
    label_kind: str = "class"  # filled from the dataset header at train time
    num_classes: int = 0
    image_size: int = 16
    patch_size: int = 4
    max_text_len: int = 16
    prefix_len: int = 16
    flip: bool = True  # left-right flips, class-conditional data only
    # flow
    flow_depth: int = 8
    flow_width: int = 64
    flow_block_depth: int = 2
    flow_heads: int = 4
    # factoring
    factor_mode: str = "post_flow"  # none | post_flow | pre_flow_linear
    factor_dim: int = 16
    factor_init: str = "identity"  # identity | random_orthogonal | pca
    # backbone and head
    width: int = 128
    depth: int = 4
    heads: int = 4
    kv_heads: int = 1
    dropout: float = 0.1
    num_mixtures: int = 64
    # curriculum
    sigma0: float = 64.0
    sigma_end: float = 0.0
    jitter_std: float = 0.3
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_frac: float = 0.02
    min_lr_frac: float = 0.1
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    text_weight: float = 0.0025
    cond_drop: float = 0.1
    stop_gradient_image_prefix: bool = True
    direction: str = "random"  # random | text_then_image | image_then_text (caption data)
    # cadence
    checkpoint_every: int = 1000
    eval_every: int = 500
    eval_examples: int = 512
    # sampling
    guidance: float = 4.0
    cfg_candidates: int = 64
    temperature: float = 1.0

    def __post_init__(self):
        self.validate()

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_channels(self) -> int:
        return 3 * self.patch_size**2

    @property
    def soft_dim(self) -> int:
        return self.patch_channels if self.factor_mode == "none" else self.factor_dim

    @property
    def flow_channels(self) -> int:
        return self.factor_dim if self.factor_mode == "pre_flow_linear" else self.patch_channels

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.factor_mode not in ("none", "post_flow", "pre_flow_linear"):
            raise ConfigError(f"unknown factor_mode {self.factor_mode!r}")
        if self.factor_init not in ("identity", "random_orthogonal", "pca"):
            raise ConfigError(f"unknown factor_init {self.factor_init!r}")
        if self.label_kind not in ("none", "class", "caption"):
            raise ConfigError(f"unknown label_kind {self.label_kind!r}")
        if self.direction not in ("random", "text_then_image", "image_then_text"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.factor_mode != "none" and not 1 <= self.factor_dim <= self.patch_channels:
            raise ConfigError("factor_dim must lie in [1, 3 * patch_size^2]")
        if self.flow_depth and self.flow_channels % 2:
            raise ConfigError("coupling blocks need an even channel count")
        if not 0.0 <= self.cond_drop <= 1.0:
            raise ConfigError("cond_drop must be a probability")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    # -- text format -------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {n}: unknown config key {key!r}")
            values[key] = parse_value(types[key], val, key)
        values.update(overrides or {})
        return cls.from_dict(values)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(), overrides)


def parse_value(type_name: str, val: str, key: str = "?"):
    try:
        if type_name == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if type_name == "int":
            return int(val)
        if type_name == "float":
            return float(val)
        return val.strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"bad value {val!r} for {key} ({type_name})") from None
