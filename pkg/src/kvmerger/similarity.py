"""Token-level cosine similarity profiles and layer-wise compression ratios."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedSimilarityError
from .model import MergeConfig, Trace

__all__ = [
    "SimilarityProfile",
    "cosine_similarity",
    "adjacent_similarities",
    "similarity_profile",
    "layer_compression_profile",
    "write_adjacent_csv",
    "write_heatmap_csv",
    "write_layer_profile_csv",
]


@dataclass
class SimilarityProfile:
    adjacent_sims: np.ndarray  # (T-1,) float64
    full_matrix: np.ndarray | None  # (T, T) float64 when requested
    mean: float
    min: float
    max: float


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def adjacent_similarities(keys: np.ndarray) -> np.ndarray:
    """cosine(k[i], k[i+1]) for all consecutive rows, vectorized."""
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise UndefinedSimilarityError(f"zero-norm key state at index {int(zero[0])}")
    dots = np.einsum("ij,ij->i", keys[:-1], keys[1:])
    return np.clip(dots / (norms[:-1] * norms[1:]), -1.0, 1.0)


def similarity_profile(keys: np.ndarray, full: bool = False) -> SimilarityProfile:
    """Adjacent-pair similarity profile; the full T x T map only on demand."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] < 2:
        raise ValueError("need at least 2 states for a similarity profile")
    adjacent = adjacent_similarities(keys)
    matrix = None
    if full:
        norms = np.linalg.norm(keys, axis=1)
        matrix = np.clip((keys @ keys.T) / np.outer(norms, norms), -1.0, 1.0)
    return SimilarityProfile(
        adjacent_sims=adjacent,
        full_matrix=matrix,
        mean=float(adjacent.mean()),
        min=float(adjacent.min()),
        max=float(adjacent.max()),
    )


def layer_compression_profile(t: Trace, cfg: MergeConfig, base: float = 10000.0) -> np.ndarray:
    """Per-layer mean kept ratio under the identification stage of `cfg`.

    The ratio for one head is (conserved + merged-set count) / T, i.e. the
    cache size after merging over the original size.
    """
    from .identify import identify_merge_sets, select_protected  # cycle guard
    from .attention import head_scores, prepare_head
    from .metrics import default_query_window

    t.validate()
    ratios = np.empty(t.num_layers, dtype=np.float64)
    T = t.seq_len
    window = default_query_window(T)
    need_scores = cfg.protect_frac > 0
    for layer in range(t.num_layers):
        per_head = []
        for head in range(t.num_heads):
            cache, _ = prepare_head(t, layer, head, base=base)
            a = (
                head_scores(t, layer, head, base=base, window=window)
                if need_scores
                else np.zeros(T)
            )
            protected_idx, recent_idx = select_protected(a, cfg)
            part = identify_merge_sets(cache.keys, protected_idx, recent_idx, cfg.epsilon)
            kept = len(protected_idx) + len(recent_idx) + len(part.sets)
            per_head.append(kept / T)
        ratios[layer] = np.mean(per_head)
    return ratios


def write_adjacent_csv(path, adjacent: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "similarity"])
        for i, s in enumerate(np.asarray(adjacent)):
            w.writerow([i, repr(float(s))])


def write_heatmap_csv(path, matrix: np.ndarray) -> None:
    """Lower triangle (i >= j) of the symmetric similarity map."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "similarity"])
        for i in range(matrix.shape[0]):
            for j in range(i + 1):
                w.writerow([i, j, repr(float(matrix[i, j]))])


def write_layer_profile_csv(path, ratios: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "ratio"])
        for i, r in enumerate(np.asarray(ratios)):
            w.writerow([i, repr(float(r))])
