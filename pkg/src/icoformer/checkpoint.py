"""SUFM1 container: magic, length-prefixed JSON manifest, raw little-endian blob.

Layout::

    b"SUFM1" | uint32 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest holds ``tensors`` (name, dtype, shape, offset, nbytes; offsets
relative to the blob start, in manifest order, non-overlapping) plus free
form ``meta``. Model checkpoints store every parameter as ``<f4`` and echo
the model config in ``meta.config``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, SphereUNet

MAGIC = b"SUFM1"
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1", "|b1"}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dt = le.dtype.str
        if dt not in _ALLOWED:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        manifest = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    blob = memoryview(data)[pos + hlen:]
    arrays, expect, seen = {}, 0, set()
    for ent in manifest.get("tensors", []):
        name = ent["name"]
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        seen.add(name)
        if ent["dtype"] not in _ALLOWED:
            raise CheckpointError(f"{name}: unsupported dtype {ent['dtype']}")
        dt = np.dtype(ent["dtype"])
        shape = tuple(ent["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if ent["offset"] != expect or ent["nbytes"] != nbytes:
            raise CheckpointError(f"{name}: manifest offset/size inconsistent")
        if expect + nbytes > len(blob):
            raise CheckpointError(f"{name}: blob truncated")
        arrays[name] = np.frombuffer(blob[expect:expect + nbytes], dtype=dt).reshape(shape).copy()
        expect += nbytes
    if expect != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - expect} trailing bytes after last tensor")
    return arrays, manifest.get("meta", {})


def save_checkpoint(model: SphereUNet, path) -> None:
    arrays = {name: p.data.astype("<f4") for name, p in model.named_parameters()}
    save_arrays(path, arrays, {"kind": "checkpoint", "config": model.cfg.to_dict()})


def read_checkpoint_config(path) -> ModelConfig:
    _, meta = load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a model checkpoint")
    return ModelConfig.from_dict(meta["config"])


def load_checkpoint(path, cfg: ModelConfig | None = None, **model_kw) -> SphereUNet:
    """Build a model for ``cfg`` (default: the stored config) and load weights.

    ``cfg`` may use a different rank; every other field must match the
    stored config because it determines parameter shapes and semantics.
    """
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a model checkpoint")
    stored = ModelConfig.from_dict(meta["config"])
    cfg = cfg or stored
    if cfg.non_rank_dict() != stored.non_rank_dict():
        a, b = cfg.non_rank_dict(), stored.non_rank_dict()
        diff = sorted(k for k in a if a[k] != b[k])
        raise CheckpointError(f"config differs from checkpoint in non-rank fields: {diff}")
    model = SphereUNet(cfg, **model_kw)
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc.args[0]) if exc.args else str(exc)) from None
    return model
