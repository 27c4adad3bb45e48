"""Gaussian-kernel weighted merging and end-to-end head compression.

Every merging set collapses to a single state anchored at its pivot: the
kernel g_pi = exp(-||k_p - k_i||^2 / (2 sigma^2)) weights each member by
proximity to the pivot, normalized so the key weights sum to 1. Value
weights optionally carry an extra factor of the set size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .baselines import h2o_evict, recent_only_evict
from .errors import ConfigError
from .identify import MergePartition, identify_merge_sets, select_protected
from .model import FixedPointSigma, FixedSigma, HeadCache, MergeConfig

__all__ = [
    "MergeWeights",
    "select_pivot",
    "gaussian_weights",
    "resolve_sigma",
    "merge_set",
    "average_merge_set",
    "compress_head",
]

_SIGMA_FLOOR = 1e-9


@dataclass
class MergeWeights:
    pivot_idx: int  # position within the set, not absolute
    weights: np.ndarray  # (s,) float64, sums to 1
    sigma_used: float
    sigma_converged: bool = True


def select_pivot(set_indices, a: np.ndarray, rng: np.random.Generator | None = None) -> int:
    """Absolute index of the set member with maximal aggregated score.

    Ties break toward the largest index. Passing `rng` selects uniformly
    at random instead (ablation mode).
    """
    set_indices = list(set_indices)
    if not set_indices:
        raise ValueError("empty merging set")
    if rng is not None:
        return int(set_indices[rng.integers(0, len(set_indices))])
    a = np.asarray(a, dtype=np.float64)
    return max(set_indices, key=lambda i: (a[i], i))


def _kernel(keys_in_set: np.ndarray, pivot: int, sigma: float) -> np.ndarray:
    diffs = np.asarray(keys_in_set, dtype=np.float64) - np.asarray(
        keys_in_set[pivot], dtype=np.float64
    )
    sq = np.einsum("ij,ij->i", diffs, diffs)
    return np.exp(-sq / (2.0 * sigma * sigma))


def gaussian_weights(keys_in_set: np.ndarray, pivot: int, sigma: float) -> MergeWeights:
    """Normalized Gaussian-kernel weights around the pivot (g_pp = 1)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    g = _kernel(keys_in_set, pivot, sigma)
    return MergeWeights(pivot_idx=pivot, weights=g / g.sum(), sigma_used=float(sigma))


def resolve_sigma(
    keys_in_set: np.ndarray,
    pivot: int,
    mode: FixedSigma | FixedPointSigma,
) -> tuple[float, bool]:
    """Resolve the kernel width for one set; returns (sigma, converged).

    The self-consistent rule sigma = sum_i g_pi(sigma) / (sqrt(2) * s) is
    circular, so the fixed-point mode iterates it from `init`. A collapse
    below 1e-9 (all mass on the pivot) is clamped with a warning.
    """
    if isinstance(mode, FixedSigma):
        return float(mode.value), True
    s = np.asarray(keys_in_set).shape[0]
    if s < 1:
        raise ValueError("empty merging set")
    sigma = float(mode.init)
    converged = False
    for _ in range(mode.max_iter):
        nxt = float(_kernel(keys_in_set, pivot, max(sigma, _SIGMA_FLOOR)).sum()) / (
            math.sqrt(2.0) * s
        )
        if abs(nxt - sigma) < mode.tol:
            sigma = nxt
            converged = True
            break
        sigma = nxt
    if sigma <= _SIGMA_FLOOR:
        warnings.warn(
            f"fixed-point sigma collapsed to {sigma:g}; clamping to {_SIGMA_FLOOR:g} "
            "(all merge mass on the pivot)",
            RuntimeWarning,
        )
        sigma = _SIGMA_FLOOR
    return sigma, converged


def merge_set(
    keys_in_set: np.ndarray,
    values_in_set: np.ndarray,
    pivot: int,
    weights: MergeWeights,
    value_scale: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse one set to a single (key, value) pair.

    merged_key = sum w_i k_i; merged_value = sum w_i v_i, times the set
    size when `value_scale` is on.
    """
    w = np.asarray(weights.weights, dtype=np.float64)
    keys = np.asarray(keys_in_set, dtype=np.float64)
    values = np.asarray(values_in_set, dtype=np.float64)
    merged_key = w @ keys
    vw = w * keys.shape[0] if value_scale else w
    merged_value = vw @ values
    return merged_key, merged_value


def average_merge_set(
    keys_in_set: np.ndarray, values_in_set: np.ndarray, pivot: int
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-weight baseline; the pivot only supplies the position index."""
    keys = np.asarray(keys_in_set, dtype=np.float64)
    values = np.asarray(values_in_set, dtype=np.float64)
    return keys.mean(axis=0), values.mean(axis=0)


def compress_head(
    cache: HeadCache,
    a: np.ndarray,
    cfg: MergeConfig,
    rng: np.random.Generator | None = None,
    partition: MergePartition | None = None,
) -> HeadCache:
    """Run one head through the full identification + merging pipeline.

    Protected and recent states pass through verbatim; every merging set
    contributes one state at its pivot's position. Eviction policies run
    at the kept ratio the merging pipeline would achieve on this head, so
    all policies compare at matched memory.
    """
    if cfg.policy == "none":
        return HeadCache(
            keys=cache.keys.copy(),
            values=cache.values.copy(),
            positions=cache.positions.copy(),
            protected=cache.protected.copy(),
            counts=None if cache.counts is None else cache.counts.copy(),
        )

    if cfg.pivot_mode == "random" and rng is None:
        raise ConfigError("pivot_mode 'random' requires an rng")

    a = np.asarray(a, dtype=np.float64)
    T = len(cache)
    if partition is None:
        protected_idx, recent_idx = select_protected(a, cfg)
        partition = identify_merge_sets(cache.keys, protected_idx, recent_idx, cfg.epsilon)
    budget = partition.kept_count()

    if cfg.policy in ("h2o", "recent_only"):
        if cfg.policy == "h2o":
            result = h2o_evict(a, budget, recent=len(partition.recent_idx))
        else:
            result = recent_only_evict(T, budget, sinks=min(len(partition.protected_idx), budget))
        idx = np.asarray(result.kept_idx, dtype=np.int64)
        return HeadCache(
            keys=cache.keys[idx].copy(),
            values=cache.values[idx].copy(),
            positions=cache.positions[idx].copy(),
            protected=np.ones(idx.size, dtype=bool),
        )

    # Merging policies: kvmerger (gaussian kernel) or avg_merge (uniform).
    entries: list[tuple[int, np.ndarray, np.ndarray, bool, int]] = []
    for i in sorted(partition.protected_idx + partition.recent_idx):
        entries.append(
            (
                int(cache.positions[i]),
                cache.keys[i].astype(np.float64),
                cache.values[i].astype(np.float64),
                True,
                1,
            )
        )

    for start, end in partition.sets:
        members = list(range(start, end + 1))
        pivot_abs = select_pivot(members, a, rng=rng if cfg.pivot_mode == "random" else None)
        pivot_local = pivot_abs - start
        k_set = cache.keys[start : end + 1]
        v_set = cache.values[start : end + 1]
        if cfg.policy == "kvmerger":
            sigma, _ = resolve_sigma(k_set, pivot_local, cfg.sigma_mode)
            weights = gaussian_weights(k_set, pivot_local, sigma)
            mk, mv = merge_set(k_set, v_set, pivot_local, weights, cfg.value_scale)
        else:
            mk, mv = average_merge_set(k_set, v_set, pivot_local)
        entries.append((int(cache.positions[pivot_abs]), mk, mv, False, len(members)))

    entries.sort(key=lambda e: e[0])
    keys = np.array([e[1] for e in entries], dtype=np.float32)
    values = np.array([e[2] for e in entries], dtype=np.float32)
    positions = np.array([e[0] for e in entries], dtype=np.int64)
    protected = np.array([e[3] for e in entries], dtype=bool)
    counts = np.array([e[4] for e in entries], dtype=np.int64)
    return HeadCache(
        keys=keys, values=values, positions=positions, protected=protected, counts=counts
    )
