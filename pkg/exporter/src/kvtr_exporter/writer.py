"""KVTR trace file writer.

Implements the wire format only: magic "KVTR", u32 version (=1), u32
flags (bit0 queries, bit1 attention aggregates, bit2 rotation applied),
u32 layers/heads/seq_len/head_dim, then little-endian float32 tensors in
layer, head, token, channel order. Provenance goes to a JSON sidecar at
`<path>.meta.json`. There is deliberately no reader here; conformance is
checked against the consumer's validator.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"KVTR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

FLAG_QUERIES = 1 << 0
FLAG_ATTN_AGG = 1 << 1
FLAG_ROPE = 1 << 2


def write_trace(
    path: str | os.PathLike,
    keys: np.ndarray,
    values: np.ndarray,
    queries: np.ndarray | None = None,
    attn_agg: np.ndarray | None = None,
    rope_applied: bool = False,
    source_meta: str = "",
) -> None:
    """Write one trace atomically; tensors are (layers, heads, T, head_dim)."""
    keys = np.ascontiguousarray(keys, dtype="<f4")
    values = np.ascontiguousarray(values, dtype="<f4")
    if keys.ndim != 4:
        raise ValueError(f"keys must be 4-D, got shape {keys.shape}")
    if values.shape != keys.shape:
        raise ValueError(f"values shape {values.shape} != keys shape {keys.shape}")
    layers, heads, T, d = keys.shape
    if d % 2 != 0:
        raise ValueError(f"head_dim must be even, got {d}")

    flags = FLAG_ROPE if rope_applied else 0
    if queries is not None:
        queries = np.ascontiguousarray(queries, dtype="<f4")
        if queries.shape != keys.shape:
            raise ValueError(f"queries shape {queries.shape} != {keys.shape}")
        flags |= FLAG_QUERIES
    if attn_agg is not None:
        attn_agg = np.ascontiguousarray(attn_agg, dtype="<f4")
        if attn_agg.shape != (layers, heads, T):
            raise ValueError(f"attn_agg shape {attn_agg.shape} != {(layers, heads, T)}")
        flags |= FLAG_ATTN_AGG

    path = Path(path)
    header = _HEADER.pack(MAGIC, VERSION, flags, layers, heads, T, d)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(keys.tobytes())
            f.write(values.tobytes())
            if queries is not None:
                f.write(queries.tobytes())
            if attn_agg is not None:
                f.write(attn_agg.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    sidecar = path.with_name(path.name + ".meta.json")
    if source_meta:
        tmp_meta = str(sidecar) + ".tmp"
        with open(tmp_meta, "w") as f:
            json.dump({"source_meta": source_meta}, f, sort_keys=True)
            f.write("\n")
        os.replace(tmp_meta, sidecar)
    elif sidecar.exists():
        sidecar.unlink()
