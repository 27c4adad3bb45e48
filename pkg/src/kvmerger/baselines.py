"""Eviction comparators: heavy-hitter top-k and recency-window retention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["EvictionResult", "h2o_evict", "recent_only_evict"]


@dataclass
class EvictionResult:
    kept_idx: list[int]
    dropped_idx: list[int]


def h2o_evict(a: np.ndarray, budget: int, recent: int = 0) -> EvictionResult:
    """Keep the last `recent` positions plus the top-scoring remainder.

    Score ties break toward the larger index.
    """
    a = np.asarray(a, dtype=np.float64)
    T = a.shape[0]
    if not 0 <= recent <= budget <= T:
        raise ValueError(f"need 0 <= recent <= budget <= T, got {recent}/{budget}/{T}")
    kept = set(range(T - recent, T))
    candidates = sorted(
        (i for i in range(T - recent)), key=lambda i: (a[i], i), reverse=True
    )
    kept.update(candidates[: budget - recent])
    kept_idx = sorted(kept)
    dropped_idx = sorted(set(range(T)) - kept)
    return EvictionResult(kept_idx=kept_idx, dropped_idx=dropped_idx)


def recent_only_evict(T: int, budget: int, sinks: int = 0) -> EvictionResult:
    """Keep the first `sinks` positions and the most recent remainder."""
    if not 0 <= sinks <= budget <= T:
        raise ValueError(f"need 0 <= sinks <= budget <= T, got {sinks}/{budget}/{T}")
    # budget <= T guarantees the window never overlaps the sink block.
    kept = set(range(sinks)) | set(range(T - (budget - sinks), T))
    kept_idx = sorted(kept)
    dropped_idx = sorted(set(range(T)) - kept)
    return EvictionResult(kept_idx=kept_idx, dropped_idx=dropped_idx)
