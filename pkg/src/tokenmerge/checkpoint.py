"""Adapter-only checkpoints in the FPET binary format.

Layout (little-endian)::

    magic "FPET", version u16, entry count u32
    per entry: name_len u16, name utf-8, ndim u8, dims u64 * ndim,
               dtype u8 (0 = f32, 1 = f64), raw element bytes

The model configuration is echoed in an entry named ``__config__``: a 1-d
f64 tensor holding the UTF-8 bytes of the flat ``key=value`` config text.
Backbone weights are never written; they are regenerated from
``backbone_seed``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPET"
VERSION = 1
CONFIG_ENTRY = "__config__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<4sHI", MAGIC, VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(struct.pack("<B", code))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic, version, count = struct.unpack("<4sHI", take(10))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return tensors


def save(path, tensors: dict[str, np.ndarray]) -> int:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_config(cfg: dict) -> np.ndarray:
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items())
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_config(arr: np.ndarray) -> dict[str, str]:
    text = bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
    return parse_kv(text)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return "x".join(str(x) for x in v)
    return str(v)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def model_tensors(model, include_backbone: bool = False) -> dict[str, np.ndarray]:
    """Adapter and head tensors (plus config echo); ``include_backbone`` dumps everything."""
    trainable, frozen = model.partition()
    chosen = {**trainable, **frozen} if include_backbone else trainable
    tensors = {name: node.value for name, node in sorted(chosen.items())}
    tensors[CONFIG_ENTRY] = encode_config(model.cfg.to_dict())
    return tensors


def save_model(path, model) -> int:
    return save(path, model_tensors(model))


def restore_model(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into ``model``; any mismatch raises."""
    if CONFIG_ENTRY in tensors:
        saved = decode_config(tensors[CONFIG_ENTRY])
        current = {k: _fmt(v) for k, v in model.cfg.to_dict().items()}
        diffs = [k for k in saved if k in current and saved[k] != current[k] and k != "dtype"]
        if diffs:
            detail = ", ".join(f"{k}: checkpoint {saved[k]} vs model {current[k]}" for k in diffs)
            raise CheckpointError(f"checkpoint config does not match model ({detail})")
    trainable, _ = model.partition()
    names = set(tensors) - {CONFIG_ENTRY}
    missing = set(trainable) - names
    extra = names - set(trainable)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, node in trainable.items():
        arr = tensors[name]
        if arr.shape != node.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {node.shape}")
        node.value = arr.astype(node.dtype, copy=True)
