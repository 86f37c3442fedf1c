"""Versioned binary container for named arrays plus JSON metadata.

Layout::

    magic    4 bytes  b"VQTB"
    version  uint32 little-endian
    hlen     uint64 little-endian, length of the header
    header   UTF-8 JSON, keys sorted: {"meta": {...}, "tensors": [...]}
    data     raw little-endian array bytes, in header order

Each tensor entry records name, dtype ("<f4", "<f8" or "<i8"), shape, offset
(relative to the data section) and byte count.  Writing the same arrays and
metadata always produces the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VQTB"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f4", "<f8", "<i8"}


class CheckpointError(ValueError):
    """Malformed or incompatible container; messages carry the byte offset."""


def _canonical_dtype(arr: np.ndarray, float_dtype: str) -> str:
    if np.issubdtype(arr.dtype, np.integer):
        return "<i8"
    if np.issubdtype(arr.dtype, np.floating):
        return float_dtype
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None, float_dtype: str = "<f4") -> bytes:
    if float_dtype not in ("<f4", "<f8"):
        raise ValueError(f"float_dtype must be '<f4' or '<f8', got {float_dtype!r}")
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = _canonical_dtype(arr, float_dtype)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"),
                        allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"truncated prefix: {len(buf)} bytes at offset 0, need {_PREFIX.size}")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise CheckpointError(f"header of {hlen} bytes at offset {start} runs past end of file ({len(buf)})")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header at offset {start}: {exc}") from None
    base = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        dt, shape = entry["dtype"], tuple(entry["shape"])
        if dt not in _DTYPES:
            raise CheckpointError(f"tensor {entry['name']!r}: unknown dtype {dt!r}")
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dt).itemsize
        if entry["nbytes"] != expected:
            raise CheckpointError(f"tensor {entry['name']!r} at offset {lo}: {entry['nbytes']} bytes, shape needs {expected}")
        if hi > len(buf):
            raise CheckpointError(f"tensor {entry['name']!r} at offset {lo} runs past end of file ({len(buf)})")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(dt), count=expected // np.dtype(dt).itemsize,
                                              offset=lo).reshape(shape).copy()
    return arrays, header.get("meta", {})


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None, float_dtype: str = "<f4") -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arrays, meta, float_dtype))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


# -- model checkpoints ---------------------------------------------------------

def model_arrays(model, optimizer=None) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    if model.codebook is not None:
        arrays["codebook.usage"] = model.codebook.usage_counts
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def save_model(path, model, optimizer=None, step: int = 0, extra: dict | None = None,
               float_dtype: str = "<f4") -> Path:
    meta = {"kind": "timbre-model", "config": model.config.to_dict(), "seed": int(model.seed), "step": int(step)}
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps, "step": optimizer.step_count}
    if extra:
        meta["extra"] = extra
    return save(path, model_arrays(model, optimizer), meta, float_dtype)


def load_model(path):
    """Rebuild (model, meta) from a model checkpoint."""
    from .model import ModelConfig, TimbreModel

    arrays, meta = load(path)
    if meta.get("kind") != "timbre-model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    model = TimbreModel(ModelConfig.from_dict(meta["config"]), seed=meta.get("seed", 0))
    model.load_state_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    if model.codebook is not None and "codebook.usage" in arrays:
        model.codebook.usage_counts[:] = arrays["codebook.usage"]
    return model, meta, arrays


def restore_optimizer(optimizer, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    opt_meta = meta.get("optimizer")
    if opt_meta is None:
        raise CheckpointError("checkpoint holds no optimizer state")
    optimizer.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")}, opt_meta["step"])
