"""KVTR binary trace format.

Layout (little-endian): magic "KVTR", u32 version (=1), u32 flags
(bit0 queries present, bit1 attn_agg present, bit2 rope applied),
u32 layers, u32 heads, u32 seq_len, u32 head_dim, then float32 tensors
keys, values, [queries], [attn_agg], each layer-major then head, token,
channel. Free-form provenance lives in an optional `<path>.meta.json`
sidecar, never in the binary file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import TraceCorruptionError, TraceDataError, TraceFormatError
from .model import Trace

__all__ = ["load_trace", "save_trace", "MAGIC", "VERSION"]

MAGIC = b"KVTR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

FLAG_QUERIES = 1 << 0
FLAG_ATTN_AGG = 1 << 1
FLAG_ROPE = 1 << 2


def save_trace(t: Trace, path: str | os.PathLike) -> None:
    """Write `t` to `path` (atomic: temp file + rename), deterministically."""
    t.validate()
    path = Path(path)
    flags = 0
    if t.queries is not None:
        flags |= FLAG_QUERIES
    if t.attn_agg is not None:
        flags |= FLAG_ATTN_AGG
    if t.rope_applied:
        flags |= FLAG_ROPE

    header = _HEADER.pack(
        MAGIC, VERSION, flags, t.num_layers, t.num_heads, t.seq_len, t.head_dim
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(t.keys, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())
            if t.queries is not None:
                f.write(np.ascontiguousarray(t.queries, dtype="<f4").tobytes())
            if t.attn_agg is not None:
                f.write(np.ascontiguousarray(t.attn_agg, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    sidecar = path.with_name(path.name + ".meta.json")
    if t.source_meta:
        tmp_meta = str(sidecar) + ".tmp"
        with open(tmp_meta, "w") as f:
            json.dump({"source_meta": t.source_meta}, f, sort_keys=True)
            f.write("\n")
        os.replace(tmp_meta, sidecar)
    elif sidecar.exists():
        sidecar.unlink()


def load_trace(path: str | os.PathLike) -> Trace:
    """Read a KVTR file, validating format, extents, and finiteness."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TraceFormatError(f"{path}: file shorter than KVTR header")
    magic, version, flags, layers, heads, T, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TraceFormatError(
            f"{path}: unsupported version {version}, supported version is {VERSION}"
        )

    n_state = layers * heads * T * d
    n_agg = layers * heads * T
    expected = 2 * n_state
    if flags & FLAG_QUERIES:
        expected += n_state
    if flags & FLAG_ATTN_AGG:
        expected += n_agg
    payload = len(data) - _HEADER.size
    if payload != expected * 4:
        raise TraceCorruptionError(
            f"{path}: payload is {payload} bytes, header implies {expected * 4}"
        )

    shape = (layers, heads, T, d)
    offset = _HEADER.size

    def take(count: int, shp: tuple) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        return arr.reshape(shp).copy()

    keys = take(n_state, shape)
    values = take(n_state, shape)
    queries = take(n_state, shape) if flags & FLAG_QUERIES else None
    attn_agg = take(n_agg, shape[:3]) if flags & FLAG_ATTN_AGG else None

    source_meta = ""
    sidecar = path.with_name(path.name + ".meta.json")
    if sidecar.exists():
        source_meta = json.loads(sidecar.read_text()).get("source_meta", "")

    t = Trace(
        keys=keys,
        values=values,
        queries=queries,
        attn_agg=attn_agg,
        rope_applied=bool(flags & FLAG_ROPE),
        source_meta=source_meta,
    )
    try:
        t.validate()
    except TraceDataError:
        raise
    return t
