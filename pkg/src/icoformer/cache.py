"""On-disk cache of neighbor and relative-angle tables.

Entries are keyed by (rank, node type, K) and carry a SHA-256 of their
arrays. Unreadable or mismatching entries are rebuilt, never trusted.
Writes go to a temp file that is renamed into place.
"""
from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path

import numpy as np

from .attention import AttentionTables, build_attention_tables
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .posenc import RelPosTable, SinusoidSpec
from .sphere import NeighborTable, NodeType, SphereGraph, icosphere

log = logging.getLogger(__name__)

ENV_VAR = "SUFM_CACHE_DIR"
CACHE_VERSION = 1


def resolve_cache_dir(explicit=None) -> Path | None:
    value = explicit if explicit is not None else os.environ.get(ENV_VAR)
    return Path(value) if value else None


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(a.dtype.str.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def entry_path(cache_dir: Path, rank: int, node_type, k: int) -> Path:
    return Path(cache_dir) / f"tables-v{CACHE_VERSION}-r{rank}-{NodeType.parse(node_type).value}-k{k}.sufm"


def _read_entry(path: Path, rank: int, node_type: NodeType, k: int):
    arrays, meta = load_arrays(path)
    want = {"kind": "tables", "version": CACHE_VERSION, "rank": rank, "node_type": node_type.value, "k": k}
    if any(meta.get(key) != val for key, val in want.items()):
        raise CheckpointError("cache key mismatch")
    if meta.get("sha256") != _digest(arrays):
        raise CheckpointError("cache content hash mismatch")
    table = NeighborTable(k, arrays["indices"], arrays["mask"])
    scale = tuple(float(s) for s in arrays["scale"])
    rel = RelPosTable(table, arrays["raw"], arrays["normalized"], scale)
    return table, rel


def cached_attention_tables(g: SphereGraph, node_type, k: int, spec: SinusoidSpec = SinusoidSpec(),
                            symmetric_bias: bool = True, cache_dir=None) -> AttentionTables:
    """Like :func:`build_attention_tables`, backed by the cache when one is set.

    Only the canonical pole-oriented graphs are cached.
    """
    node_type = NodeType.parse(node_type)
    cache_dir = resolve_cache_dir(cache_dir)
    if cache_dir is None or g is not icosphere(g.rank):
        return build_attention_tables(g, node_type, k, spec=spec, symmetric_bias=symmetric_bias)
    path = entry_path(cache_dir, g.rank, node_type, k)
    if path.exists():
        try:
            table, rel = _read_entry(path, g.rank, node_type, k)
            return build_attention_tables(g, node_type, k, spec=spec, symmetric_bias=symmetric_bias,
                                          neighbors=table, relpos=rel)
        except (CheckpointError, KeyError, ValueError, OSError) as exc:
            log.warning("rebuilding cache entry %s: %s", path, exc)
    tables = build_attention_tables(g, node_type, k, spec=spec, symmetric_bias=symmetric_bias)
    arrays = {
        "indices": tables.neighbors.indices,
        "mask": tables.neighbors.mask,
        "raw": tables.relpos.raw,
        "normalized": tables.relpos.normalized,
        "scale": np.asarray(tables.relpos.scale, dtype=np.float64),
    }
    meta = {"kind": "tables", "version": CACHE_VERSION, "rank": g.rank, "node_type": node_type.value,
            "k": k, "sha256": _digest(arrays)}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_arrays(path, arrays, meta)
    except OSError as exc:
        log.warning("could not write cache entry %s: %s", path, exc)
    return tables


def tables_provider(cache_dir=None):
    """Adapter for ``SphereUNet(tables_provider=...)``."""
    def provider(g, node_type, k, spec=SinusoidSpec(), symmetric_bias=True):
        return cached_attention_tables(g, node_type, k, spec, symmetric_bias, cache_dir)
    return provider
