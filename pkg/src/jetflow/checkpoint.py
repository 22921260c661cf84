"""Single-file checkpoints: JSON header with a tensor manifest, then raw tensor bytes.

Layout::

    b"JFCK"  uint32 format version  uint64 header length  header JSON  tensor data

The header holds ``{"tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
"config": {...}, "meta": {...}}``; offsets are relative to the start of the
data section and all tensors are stored little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"JFCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "bool": (torch.bool, "|b1"),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> None:
    manifest, blobs, offset = {}, [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _BY_TORCH:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dtype = _BY_TORCH[t.dtype]
        data = t.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        manifest[name] = {"dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": manifest, "config": config, "meta": meta or {}}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(tensors, config dict, meta dict)``."""
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen])
    base = _PREFIX.size + hlen
    tensors = {}
    for name, entry in header["tensors"].items():
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(buf):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        arr = np.frombuffer(buf, np_dtype, entry["nbytes"] // np.dtype(np_dtype).itemsize, start)
        tensors[name] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return tensors, header["config"], header["meta"]
