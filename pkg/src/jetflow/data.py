"""Dataset files, synthetic shapes, byte tokenizer and sequence packing."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# vocabulary

BOI, BOT, EOS = 256, 257, 258
VOCAB_SIZE = 259

# token kinds inside a packed sequence
TEXT, SOFT, CLASS, NOLABEL, BOUNDARY, PAD = range(6)

LABEL_KINDS = ("none", "class", "caption")


def tokenize(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids) -> bytes:
    """Bytes for ids < 256; stops at EOS and drops the boundary markers."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < 256:
            out.append(i)
        elif i not in (BOI, BOT):
            raise ValueError(f"token id {i} is outside the vocabulary")
    return bytes(out)


# ---------------------------------------------------------------------------
# dataset file

MAGIC = b"JFDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHBH")


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetFile:
    images: np.ndarray  # [N, H, W, 3] uint8
    label_kind: str = "none"
    labels: list | np.ndarray | None = None  # class ids or caption bytes
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DatasetFormatError("images must be [N, H, W, 3]")
        if self.label_kind not in LABEL_KINDS:
            raise DatasetFormatError(f"unknown label kind {self.label_kind!r}")
        if self.label_kind == "class":
            self.labels = np.asarray(self.labels, dtype=np.int64)
        elif self.label_kind == "caption":
            self.labels = [bytes(c) for c in self.labels]
        if self.label_kind != "none" and len(self.labels) != len(self.images):
            raise DatasetFormatError("one label per image required")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> "DatasetFile":
        idx = np.asarray(idx)
        labels = None
        if self.label_kind == "class":
            labels = self.labels[idx]
        elif self.label_kind == "caption":
            labels = [self.labels[i] for i in idx]
        return DatasetFile(self.images[idx], self.label_kind, labels, self.num_classes)

    def to_bytes(self) -> bytes:
        n, h, w, _ = self.images.shape
        parts = [_HEADER.pack(MAGIC, VERSION, n, h, w, LABEL_KINDS.index(self.label_kind), self.num_classes)]
        for i in range(n):
            parts.append(self.images[i].tobytes())
            if self.label_kind == "class":
                parts.append(struct.pack("<H", int(self.labels[i])))
            elif self.label_kind == "caption":
                parts.append(struct.pack("<H", len(self.labels[i])) + self.labels[i])
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DatasetFile":
        if len(buf) < _HEADER.size:
            raise DatasetFormatError("truncated header")
        magic, version, n, h, w, kind, num_classes = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise DatasetFormatError("bad magic; not a JFDS dataset file")
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        if kind >= len(LABEL_KINDS):
            raise DatasetFormatError(f"bad label kind {kind}")
        label_kind = LABEL_KINDS[kind]
        size = h * w * 3
        off = _HEADER.size
        if label_kind == "caption":
            images = np.empty((n, h, w, 3), dtype=np.uint8)
            labels = []
            for i in range(n):
                if off + size + 2 > len(buf):
                    raise DatasetFormatError("truncated record")
                images[i] = np.frombuffer(buf, np.uint8, size, off).reshape(h, w, 3)
                (length,) = struct.unpack_from("<H", buf, off + size)
                off += size + 2
                labels.append(bytes(buf[off:off + length]))
                off += length
            if off != len(buf):
                raise DatasetFormatError("file length does not match the header")
        else:
            rec = size + (2 if label_kind == "class" else 0)
            if len(buf) != off + n * rec:
                raise DatasetFormatError("file length does not match the header")
            raw = np.frombuffer(buf, np.uint8, n * rec, off).reshape(n, rec)
            images = raw[:, :size].reshape(n, h, w, 3).copy()
            labels = raw[:, size:].copy().view("<u2")[:, 0].astype(np.int64) if label_kind == "class" else None
        return cls(images, label_kind, labels, num_classes)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "DatasetFile":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic shapes

COLORS = {
    "red": (205, 45, 40),
    "green": (45, 175, 60),
    "blue": (50, 75, 215),
    "yellow": (225, 200, 40),
    "purple": (150, 60, 180),
}
SHAPES = ("circle", "square", "triangle")


@dataclass
class SynthShapesSpec:
    count: int = 4096
    size: int = 16
    shapes: tuple = SHAPES
    colors: tuple = ("red", "green", "blue")
    captions: bool = False
    seed: int = 0
    texture_std: float = 3.0
    supersample: int = 4

    @property
    def num_classes(self) -> int:
        return len(self.shapes) * len(self.colors)

    def class_name(self, c: int) -> str:
        return f"{self.colors[c % len(self.colors)]} {self.shapes[c // len(self.colors)]}"


def _coverage(shape: str, gx, gy, cx, cy, r):
    dx, dy = gx - cx[:, None, None], gy - cy[:, None, None]
    r = r[:, None, None]
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    # upright triangle inscribed in the circle of radius r (y grows downwards)
    s3 = np.sqrt(3.0)
    return (dy <= 0.5 * r) & (s3 * dx - dy <= r) & (-s3 * dx - dy <= r)


def synth_shapes(spec: SynthShapesSpec) -> DatasetFile:
    """One anti-aliased shape per image on a smooth, lightly textured background."""
    rng = np.random.default_rng(spec.seed)
    n, s, ss = spec.count, spec.size, spec.supersample
    labels = rng.integers(0, spec.num_classes, n)
    shape_idx, color_idx = labels // len(spec.colors), labels % len(spec.colors)

    r = rng.uniform(0.22, 0.36, n) * s
    cx = rng.uniform(r, s - r)
    cy = rng.uniform(r, s - r)
    g = (np.arange(s * ss) + 0.5) / ss
    gx, gy = g[None, None, :], g[None, :, None]

    alpha = np.zeros((n, s, s))
    for k, shape in enumerate(spec.shapes):
        sel = np.flatnonzero(shape_idx == k)
        if len(sel):
            cov = _coverage(shape, gx, gy, cx[sel], cy[sel], r[sel]).astype(np.float64)
            alpha[sel] = cov.reshape(len(sel), s, ss, s, ss).mean(axis=(2, 4))

    # background: linear blend of two grey-ish tones along a random direction
    tone_a = rng.uniform(70, 170, (n, 1, 1, 3))
    tone_b = tone_a + rng.uniform(-40, 40, (n, 1, 1, 3))
    theta = rng.uniform(0, 2 * np.pi, n)
    pix = (np.arange(s) + 0.5) / s - 0.5
    ramp = np.cos(theta)[:, None, None] * pix[None, None, :] + np.sin(theta)[:, None, None] * pix[None, :, None]
    ramp = (ramp + 0.71) / 1.42
    background = tone_a + (tone_b - tone_a) * ramp[..., None]
    background += spec.texture_std * rng.standard_normal((n, s, s, 3))

    palette = np.array([COLORS[c] for c in spec.colors], dtype=np.float64)
    fg = palette[color_idx][:, None, None, :] + rng.uniform(-12, 12, (n, 1, 1, 3))
    img = alpha[..., None] * fg + (1 - alpha[..., None]) * background
    images = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    if spec.captions:
        caps = [f"a {spec.class_name(int(c))}".encode() for c in labels]
        return DatasetFile(images, "caption", caps, spec.num_classes)
    return DatasetFile(images, "class", labels, spec.num_classes)


# ---------------------------------------------------------------------------
# sequence packing

@dataclass
class SequenceLayout:
    num_image_tokens: int
    label_kind: str = "class"
    max_text_len: int = 16
    prefix_len: int = 16
    cond_drop: float = 0.1
    num_classes: int = 0

    @property
    def length(self) -> int:
        """Padded sequence length shared by every example of this layout."""
        t = self.num_image_tokens
        if self.label_kind == "caption":
            # text->image: text + BOI + image; image->text: image + BOT + text + EOS
            return max(self.max_text_len + 1 + t, t + 1 + self.max_text_len + 1)
        return self.prefix_len + t


@dataclass
class PackedSequence:
    kind: np.ndarray  # [L] token kinds
    token_id: np.ndarray  # [L] text/boundary id, or class id for CLASS tokens
    slot: np.ndarray  # [L] prefix slot for CLASS/NOLABEL tokens
    loss_mask: np.ndarray  # [L] bool, true on target tokens
    position_ids: np.ndarray  # [L] RoPE positions, -1 on padding
    direction: str
    image_start: int
    dropped: bool = False

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def image_is_target(self) -> bool:
        return self.direction == "text_then_image"


class OverlongCaptionError(ValueError):
    pass


def _prefix(layout: SequenceLayout, label, dropped: bool):
    n = layout.prefix_len
    slots = np.arange(n)
    if dropped or label is None:
        return [NOLABEL] * n, [0] * n, list(slots)
    if not 0 <= int(label) < layout.num_classes:
        raise ValueError(f"class id {label} outside [0, {layout.num_classes})")
    return [CLASS] * n, [int(label)] * n, list(slots)


def pack_example(label, direction: str, layout: SequenceLayout, rng: np.random.Generator) -> PackedSequence:
    """Lay out one training sequence; loss falls only on the second modality.

    ``direction`` is ``"text_then_image"``, ``"image_then_text"`` or
    ``"random"`` (uniform choice, caption datasets only). Class and
    unconditional datasets always put the image second.
    """
    t = layout.num_image_tokens
    if layout.label_kind != "caption":
        direction = "text_then_image"
    elif direction == "random":
        direction = "text_then_image" if rng.random() < 0.5 else "image_then_text"
    if direction not in ("text_then_image", "image_then_text"):
        raise ValueError(f"unknown direction {direction!r}")

    dropped = False
    if direction == "text_then_image" and layout.label_kind != "none":
        dropped = bool(rng.random() < layout.cond_drop)

    kind, tid, slot, target = [], [], [], []

    def add(k, i=0, s=0, tgt=False):
        kind.append(k)
        tid.append(i)
        slot.append(s)
        target.append(tgt)

    if layout.label_kind == "caption":
        text = tokenize(label)
        if len(text) > layout.max_text_len:
            raise OverlongCaptionError(f"caption of {len(text)} bytes exceeds {layout.max_text_len}")
        pad = layout.max_text_len - len(text)
        if direction == "text_then_image":
            if dropped:
                for s in range(layout.max_text_len):
                    add(NOLABEL, 0, s)
            else:
                for i in text:
                    add(TEXT, i)
                for _ in range(pad):
                    add(PAD)
            add(BOUNDARY, BOI)
            image_start = len(kind)
            for _ in range(t):
                add(SOFT, tgt=True)
        else:
            image_start = 0
            for _ in range(t):
                add(SOFT)
            add(BOUNDARY, BOT)
            for i in text:
                add(TEXT, i, tgt=True)
            add(TEXT, EOS, tgt=True)
            for _ in range(pad):
                add(PAD)
    else:
        k, ids, slots = _prefix(layout, label if layout.label_kind == "class" else None, dropped)
        for a, b, c in zip(k, ids, slots):
            add(a, b, c)
        image_start = len(kind)
        for _ in range(t):
            add(SOFT, tgt=True)

    while len(kind) < layout.length:
        add(PAD)

    kind = np.asarray(kind, dtype=np.int64)
    real = kind != PAD
    positions = np.where(real, np.cumsum(real) - 1, -1)
    return PackedSequence(kind, np.asarray(tid, dtype=np.int64), np.asarray(slot, dtype=np.int64),
                          np.asarray(target, dtype=bool), positions.astype(np.int64), direction,
                          image_start, dropped)


def flip_left_right(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return image[:, ::-1].copy() if rng.random() < 0.5 else image
