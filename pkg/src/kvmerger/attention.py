"""Causal attention over a HeadCache and attention-score aggregation.

All accumulation runs at float64 with max-subtracted softmax. Causality is
defined on absolute position indices, so the same code serves full and
compressed caches (a merged state occupies its pivot's position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TraceDataError
from .model import HeadCache, Trace
from .rope import RopeParams, apply_rope_matrix

__all__ = [
    "AttnOutput",
    "attention",
    "aggregated_scores",
    "gqa_aggregate",
    "prepare_head",
]


@dataclass
class AttnOutput:
    outputs: np.ndarray  # (Tq, d) float64
    attn_matrix: np.ndarray | None = None  # (Tq, T) float64


def attention(
    queries: np.ndarray,
    cache: HeadCache,
    causal: bool = True,
    query_positions: np.ndarray | None = None,
    return_matrix: bool = False,
) -> AttnOutput:
    """softmax(Q K^T / sqrt(d)) V over the cache.

    With `causal`, query at absolute position t puts zero weight on cache
    states at positions > t. `query_positions` defaults to the cache
    positions (full-prefill evaluation, so Tq must equal T then).
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(cache.keys, dtype=np.float64)
    values = np.asarray(cache.values, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != keys.shape[1]:
        raise ValueError(
            f"queries shape {queries.shape} incompatible with keys {keys.shape}"
        )
    if query_positions is None:
        if causal and queries.shape[0] != keys.shape[0]:
            raise ValueError(
                "causal attention needs query_positions when Tq != cache length"
            )
        query_positions = cache.positions
    query_positions = np.asarray(query_positions)

    d = keys.shape[1]
    logits = queries @ keys.T / np.sqrt(d)
    if causal:
        future = cache.positions[None, :] > query_positions[:, None]
        logits = np.where(future, -np.inf, logits)

    logits -= logits.max(axis=1, keepdims=True)
    raw = np.exp(logits)
    if cache.counts is None:
        weights = raw / raw.sum(axis=1, keepdims=True)
        outputs = weights @ values
    else:
        # Each slot's count is how many original states it stands for; the
        # softmax mass they would have contributed stays in the
        # denominator so conserved states keep their original share.
        counts = np.asarray(cache.counts, dtype=np.float64)
        denom = (raw * counts[None, :]).sum(axis=1, keepdims=True)
        outputs = (raw / denom) @ values
        weights = raw * counts[None, :] / denom
    return AttnOutput(outputs=outputs, attn_matrix=weights if return_matrix else None)


def aggregated_scores(attn: np.ndarray) -> np.ndarray:
    """Total attention received by each cache state: column sums of `attn`.

    Rows of causal softmax all sum to 1 and carry no importance signal;
    the heavy-hitter convention sums the mass each state receives.
    """
    attn = np.asarray(attn, dtype=np.float64)
    return attn.sum(axis=0)


def gqa_aggregate(attn_per_qhead: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the attention maps sharing one KV head."""
    if not attn_per_qhead:
        raise ValueError("need at least one attention map")
    first = np.asarray(attn_per_qhead[0], dtype=np.float64)
    for a in attn_per_qhead[1:]:
        if np.asarray(a).shape != first.shape:
            raise ValueError("all attention maps must share one shape")
    return np.mean([np.asarray(a, dtype=np.float64) for a in attn_per_qhead], axis=0)


def prepare_head(
    t: Trace, layer: int, head: int, base: float = 10000.0, rotate: bool = False
) -> tuple[HeadCache, np.ndarray | None]:
    """Extract one head's cache and query states.

    Keys are consumed exactly as stored in the trace. With `rotate`, a
    trace holding pre-rotation states gets position-encoded here (the
    rope_applied flag guards against double rotation); this is an
    analysis aid, not part of the compression pipeline.
    """
    cache = t.head(layer, head)
    queries = None if t.queries is None else t.queries[layer, head].astype(np.float64)
    if rotate and not t.rope_applied:
        p = RopeParams(head_dim=t.head_dim, base=base)
        cache.keys = apply_rope_matrix(cache.keys, cache.positions, p).astype(np.float32)
        if queries is not None:
            queries = apply_rope_matrix(queries, cache.positions, p)
    return cache, queries


def head_scores(
    t: Trace, layer: int, head: int, base: float = 10000.0, window: int | None = None
) -> np.ndarray:
    """Aggregated attention score per state for one head.

    Uses the trace's stored aggregate when present, otherwise evaluates
    full-prefill causal attention from the trace queries. `window`
    restricts aggregation to the last `window` query rows (default: all).
    """
    if t.attn_agg is not None:
        return t.attn_agg[layer, head].astype(np.float64)
    if t.queries is None:
        raise TraceDataError(
            "trace has neither attn_agg nor queries; cannot score states"
        )
    cache, queries = prepare_head(t, layer, head, base=base)
    out = attention(queries, cache, causal=True, return_matrix=True)
    attn = out.attn_matrix
    if window is not None:
        attn = attn[-window:]
    return aggregated_scores(attn)
