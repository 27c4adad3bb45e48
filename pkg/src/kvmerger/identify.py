"""Merging-set identification.

The greedy pass walks from the last token backwards, chaining each state
to its left neighbor while adjacent cosine similarity stays strictly above
the threshold; protected and recent states break chains on both sides. A
dynamic-programming oracle over all consecutive segmentations provides the
exact optimum of the clustering objective for small instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import MergeConfig
from .similarity import adjacent_similarities

__all__ = [
    "MergePartition",
    "select_protected",
    "identify_merge_sets",
    "partition_objective",
    "oracle_optimal_partition",
]


@dataclass
class MergePartition:
    """Consecutive index ranges (inclusive) covering the mergeable positions."""

    sets: list[tuple[int, int]]
    protected_idx: list[int] = field(default_factory=list)
    recent_idx: list[int] = field(default_factory=list)

    @property
    def mergeable(self) -> list[int]:
        out: list[int] = []
        for start, end in self.sets:
            out.extend(range(start, end + 1))
        return out

    def kept_count(self) -> int:
        return len(self.protected_idx) + len(self.recent_idx) + len(self.sets)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sets": [{"start": s, "end": e} for s, e in self.sets],
                "protected": list(self.protected_idx),
                "recent": list(self.recent_idx),
            },
            sort_keys=True,
        )


def select_protected(a: np.ndarray, cfg: MergeConfig) -> tuple[list[int], list[int]]:
    """Recent-window indices plus the top-scoring non-recent indices.

    recent = last ceil(recent_frac * T) positions; protected = top
    ceil(protect_frac * T) of the rest by aggregated score, ties broken
    toward larger index.
    """
    a = np.asarray(a, dtype=np.float64)
    T = a.shape[0]
    if T < 1:
        raise ValueError("need at least one state")
    if cfg.recent_frac + cfg.protect_frac >= 1.0:
        raise ConfigError("recent_frac + protect_frac must be < 1")

    n_recent = math.ceil(cfg.recent_frac * T)
    recent_idx = list(range(T - n_recent, T))

    n_protect = math.ceil(cfg.protect_frac * T)
    non_recent = np.arange(T - n_recent)
    if n_protect == 0 or non_recent.size == 0:
        return [], recent_idx
    n_protect = min(n_protect, non_recent.size)
    # Sort by (score, index) descending so equal scores favor later tokens.
    order = sorted(non_recent, key=lambda i: (a[i], i), reverse=True)
    protected_idx = sorted(int(i) for i in order[:n_protect])
    return protected_idx, recent_idx


def identify_merge_sets(
    keys: np.ndarray,
    protected_idx: list[int],
    recent_idx: list[int],
    epsilon: float,
) -> MergePartition:
    """Backward greedy chaining over adjacent similarities.

    Starting from the last mergeable token, the chain extends to the left
    neighbor while cosine(k[i-1], k[i]) > epsilon (strict) and the
    neighbor is mergeable. Excluded indices terminate chains on both
    sides, so no range ever spans a conserved state.
    """
    keys = np.asarray(keys)
    T = keys.shape[0]
    if not -1.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [-1, 1], got {epsilon}")
    excluded = np.zeros(T, dtype=bool)
    excluded[list(protected_idx)] = True
    excluded[list(recent_idx)] = True

    adj = adjacent_similarities(keys) if T > 1 else np.empty(0)

    sets: list[tuple[int, int]] = []
    i = T - 1
    while i >= 0:
        if excluded[i]:
            i -= 1
            continue
        j = i
        while j - 1 >= 0 and not excluded[j - 1] and adj[j - 1] > epsilon:
            j -= 1
        sets.append((j, i))
        i = j - 1
    sets.reverse()
    return MergePartition(
        sets=sets,
        protected_idx=sorted(int(x) for x in protected_idx),
        recent_idx=sorted(int(x) for x in recent_idx),
    )


def _pairwise_cosine(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=1)
    return np.clip((keys @ keys.T) / np.outer(norms, norms), -1.0, 1.0)


def partition_objective(
    keys: np.ndarray,
    partition: MergePartition,
    delta: np.ndarray | None = None,
) -> float:
    """Intra-set pair similarity minus inter-set pair similarity.

    Both sums range over unordered pairs of mergeable positions only.
    `delta` may supply a precomputed full similarity matrix.
    """
    if delta is None:
        delta = _pairwise_cosine(keys)
    mergeable = partition.mergeable
    labels = {}
    for s, (start, end) in enumerate(partition.sets):
        for i in range(start, end + 1):
            labels[i] = s

    intra = 0.0
    inter = 0.0
    for ai in range(len(mergeable)):
        for bi in range(ai + 1, len(mergeable)):
            i, j = mergeable[ai], mergeable[bi]
            if labels[i] == labels[j]:
                intra += delta[i, j]
            else:
                inter += delta[i, j]
    return float(intra - inter)


def oracle_optimal_partition(
    keys: np.ndarray,
    protected_idx: list[int] | None = None,
    recent_idx: list[int] | None = None,
    max_T: int = 12,
) -> MergePartition:
    """Exact maximizer of the clustering objective over consecutive splits.

    The inter-set sum equals (total pair sum) - (intra sum), so maximizing
    2*intra - total reduces to maximizing intra alone; a boundary DP over
    the mergeable positions does this in O(M^2) with prefix pair sums.
    Ties break toward fewer sets. Non-adjacent mergeable positions
    (separated by a conserved state) force a split.
    """
    protected_idx = list(protected_idx or [])
    recent_idx = list(recent_idx or [])
    keys = np.asarray(keys)
    T = keys.shape[0]
    excluded = set(protected_idx) | set(recent_idx)
    positions = [i for i in range(T) if i not in excluded]
    M = len(positions)
    if M > max_T:
        raise ValueError(f"oracle limited to {max_T} mergeable states, got {M}")
    if M == 0:
        return MergePartition(sets=[], protected_idx=sorted(protected_idx),
                              recent_idx=sorted(recent_idx))

    delta = _pairwise_cosine(keys)

    # intra[i][j]: pair-similarity sum of positions[i..j] as one set.
    intra = [[0.0] * M for _ in range(M)]
    for i in range(M):
        acc = 0.0
        for j in range(i + 1, M):
            acc += sum(delta[positions[t], positions[j]] for t in range(i, j))
            intra[i][j] = acc

    # dp[e] = (best intra sum, -set count) for the first e positions.
    NEG = (-math.inf, 0)
    dp: list[tuple[float, int]] = [NEG] * (M + 1)
    dp[0] = (0.0, 0)
    back = [0] * (M + 1)
    for e in range(1, M + 1):
        best = NEG
        best_s = 0
        for s in range(e):
            # Segment positions[s..e-1] must be consecutive in sequence.
            if positions[e - 1] - positions[s] != e - 1 - s:
                continue
            if dp[s][0] == -math.inf:
                continue
            cand = (dp[s][0] + intra[s][e - 1], dp[s][1] - 1)
            if cand > best:
                best = cand
                best_s = s
        dp[e] = best
        back[e] = best_s

    sets: list[tuple[int, int]] = []
    e = M
    while e > 0:
        s = back[e]
        sets.append((positions[s], positions[e - 1]))
        e = s
    sets.reverse()
    return MergePartition(sets=sets, protected_idx=sorted(protected_idx),
                          recent_idx=sorted(recent_idx))
