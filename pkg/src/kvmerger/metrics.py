"""Output-perturbation measurement and multi-policy comparison runs.

Perturbation is the L2 gap between attention outputs over the full cache
and over the compressed cache, evaluated on trace-provided query states at
the last few positions. No model is in the loop: this isolates exactly
the error introduced by cache compression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import attention, head_scores, prepare_head
from .errors import TraceDataError
from .identify import MergePartition, identify_merge_sets, select_protected
from .merge import compress_head
from .model import HeadCache, MergeConfig, Trace

__all__ = [
    "CompressionReport",
    "default_query_window",
    "identify_all",
    "resolve_epsilon_for_budget",
    "compress_trace",
    "output_perturbation",
    "compare_policies",
]


@dataclass
class CompressionReport:
    policy: str
    per_layer_ratio: list[float]
    global_ratio: float
    perturbation_mean: float
    perturbation_max: float
    per_query_l2: list[float]
    config: dict
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "config": self.config,
            "global_ratio": self.global_ratio,
            "per_layer_ratio": self.per_layer_ratio,
            "perturbation": {
                "mean": self.perturbation_mean,
                "max": self.perturbation_max,
                "per_query_l2": self.per_query_l2,
            },
            "seed": self.seed,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def default_query_window(T: int) -> int:
    return max(1, min(64, T // 4))


def _prepare_all(t: Trace, base: float):
    """Caches, queries, and aggregated scores for every head.

    Scores aggregate over the trailing query window (the same window the
    perturbation metric evaluates), not the whole prefill: full-prefill
    column sums are dominated by how long a state has been attendable
    rather than how much current queries care about it.
    """
    window = default_query_window(t.seq_len)
    caches, queries, scores = [], [], []
    for layer in range(t.num_layers):
        lc, lq, ls = [], [], []
        for head in range(t.num_heads):
            cache, q = prepare_head(t, layer, head, base=base)
            lc.append(cache)
            lq.append(q)
            ls.append(head_scores(t, layer, head, base=base, window=window))
        caches.append(lc)
        queries.append(lq)
        scores.append(ls)
    return caches, queries, scores


def identify_all(
    caches, scores, cfg: MergeConfig, epsilon: float | None = None
) -> list[list[MergePartition]]:
    eps = cfg.epsilon if epsilon is None else epsilon
    out = []
    for lc, ls in zip(caches, scores):
        row = []
        for cache, a in zip(lc, ls):
            protected_idx, recent_idx = select_protected(a, cfg)
            row.append(identify_merge_sets(cache.keys, protected_idx, recent_idx, eps))
        out.append(row)
    return out


def _kept_ratio(partitions, T: int) -> float:
    kept = sum(p.kept_count() for row in partitions for p in row)
    total = T * sum(len(row) for row in partitions)
    return kept / total


def resolve_epsilon_for_budget(
    caches, scores, cfg: MergeConfig, target: float, tol: float = 0.01, max_iter: int = 30
) -> float:
    """Bisect the similarity threshold until the kept ratio hits `target`.

    The kept ratio is monotone non-decreasing in the threshold, so plain
    bisection over [-1, 1] converges; iteration stops early once within
    `tol` of the target.
    """
    T = len(caches[0][0])
    lo, hi = -1.0, 1.0
    eps = cfg.epsilon
    for _ in range(max_iter):
        eps = 0.5 * (lo + hi)
        ratio = _kept_ratio(identify_all(caches, scores, cfg, epsilon=eps), T)
        if abs(ratio - target) <= tol:
            return eps
        if ratio > target:
            hi = eps
        else:
            lo = eps
    return eps


def compress_trace(
    t: Trace,
    cfg: MergeConfig,
    seed: int | None = None,
    base: float = 10000.0,
    prepared=None,
    partitions: list[list[MergePartition]] | None = None,
) -> tuple[list[list[HeadCache]], CompressionReport]:
    """Compress every head of the trace under one policy.

    `prepared` (from `_prepare_all`) and `partitions` may be passed in to
    share identification work across policies in a comparison.
    """
    t.validate()
    caches, queries, scores = prepared if prepared is not None else _prepare_all(t, base)
    T = t.seq_len

    epsilon_used = cfg.epsilon
    if partitions is None:
        if cfg.target_budget is not None:
            epsilon_used = resolve_epsilon_for_budget(caches, scores, cfg, cfg.target_budget)
        partitions = identify_all(caches, scores, cfg, epsilon=epsilon_used)

    rng = np.random.default_rng(seed) if seed is not None else None
    compressed: list[list[HeadCache]] = []
    per_layer = []
    for layer in range(t.num_layers):
        row = []
        for head in range(t.num_heads):
            row.append(
                compress_head(
                    caches[layer][head],
                    scores[layer][head],
                    cfg,
                    rng=rng,
                    partition=partitions[layer][head],
                )
            )
        compressed.append(row)
        per_layer.append(float(np.mean([len(c) / T for c in row])))

    global_ratio = float(
        sum(len(c) for row in compressed for c in row) / (T * t.num_layers * t.num_heads)
    )
    stats = output_perturbation(t, compressed, prepared=(caches, queries, scores), base=base)
    report = CompressionReport(
        policy=cfg.policy,
        per_layer_ratio=per_layer,
        global_ratio=global_ratio,
        perturbation_mean=stats["mean"],
        perturbation_max=stats["max"],
        per_query_l2=stats["per_query_l2"],
        config=cfg.to_dict(),
        seed=seed,
        extra={"epsilon_used": epsilon_used},
    )
    return compressed, report


def output_perturbation(
    t: Trace,
    compressed: list[list[HeadCache]],
    query_window: int | None = None,
    prepared=None,
    base: float = 10000.0,
) -> dict:
    """L2 gap between full-cache and compressed-cache attention outputs.

    Evaluated per layer/head at the last `query_window` query positions;
    queries attend causally by absolute position in both caches.
    """
    if t.queries is None:
        raise TraceDataError("trace has no query states; cannot measure perturbation")
    T = t.seq_len
    W = default_query_window(T) if query_window is None else query_window
    if not 1 <= W <= T:
        raise ValueError(f"query window must be in [1, {T}], got {W}")

    caches, queries, _ = prepared if prepared is not None else _prepare_all(t, base)
    q_positions = np.arange(T - W, T, dtype=np.int64)

    norms = np.empty((t.num_layers, t.num_heads, W))
    for layer in range(t.num_layers):
        for head in range(t.num_heads):
            q = queries[layer][head][T - W :]
            full = attention(q, caches[layer][head], causal=True, query_positions=q_positions)
            comp = attention(q, compressed[layer][head], causal=True, query_positions=q_positions)
            norms[layer, head] = np.linalg.norm(full.outputs - comp.outputs, axis=1)

    return {
        "mean": float(norms.mean()),
        "max": float(norms.max()),
        "per_query_l2": [float(x) for x in norms.mean(axis=(0, 1))],
    }


def compare_policies(
    t: Trace,
    policies: list[str],
    cfg: MergeConfig,
    seeds: list[int] | None = None,
) -> list[CompressionReport]:
    """Run each policy at matched kept ratio and report per (policy, seed).

    Identification is anchored on the merging pipeline: eviction policies
    inherit the per-head kept counts it achieves, so all compressive
    policies land on the same memory budget.
    """
    if not policies:
        raise ValueError("need at least one policy")
    t.validate()
    seeds = seeds if seeds else [0]

    prepared = _prepare_all(t, 10000.0)
    caches, _, scores = prepared
    epsilon_used = cfg.epsilon
    if cfg.target_budget is not None:
        epsilon_used = resolve_epsilon_for_budget(caches, scores, cfg, cfg.target_budget)
    partitions = identify_all(caches, scores, cfg, epsilon=epsilon_used)

    reports = []
    for policy in policies:
        for seed in seeds:
            run_cfg = cfg.with_policy(policy)
            _, report = compress_trace(
                t, run_cfg, seed=seed, prepared=prepared, partitions=partitions
            )
            report.extra["epsilon_used"] = epsilon_used if policy != "none" else None
            reports.append(report)
    return reports
