"""Core domain types and synthetic trace generation.

A :class:`Trace` holds per-layer, per-head key/query/value states for one
sequence; a :class:`HeadCache` is the per-head slice that compression
operates on. States are stored at float32; all reductions downstream run
at float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, TraceDataError

__all__ = [
    "Trace",
    "HeadCache",
    "MergeConfig",
    "FixedSigma",
    "FixedPointSigma",
    "POLICIES",
    "synth_trace",
]

POLICIES = ("kvmerger", "avg_merge", "h2o", "recent_only", "none")


@dataclass
class Trace:
    """Attention-state trace for a single sequence.

    keys/values (and optional queries) are float32 arrays of shape
    (layers, heads, T, head_dim); attn_agg, when present, is
    (layers, heads, T).
    """

    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray | None = None
    attn_agg: np.ndarray | None = None
    rope_applied: bool = False
    source_meta: str = ""

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def num_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def seq_len(self) -> int:
        return self.keys.shape[2]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    def validate(self) -> None:
        """Raise TraceDataError if any structural invariant is broken."""
        shape = self.keys.shape
        if len(shape) != 4:
            raise TraceDataError(f"keys must be 4-D, got shape {shape}")
        if self.values.shape != shape:
            raise TraceDataError(
                f"values shape {self.values.shape} != keys shape {shape}"
            )
        if self.queries is not None and self.queries.shape != shape:
            raise TraceDataError(
                f"queries shape {self.queries.shape} != keys shape {shape}"
            )
        if self.attn_agg is not None and self.attn_agg.shape != shape[:3]:
            raise TraceDataError(
                f"attn_agg shape {self.attn_agg.shape} != {shape[:3]}"
            )
        if shape[3] % 2 != 0:
            raise TraceDataError(f"head_dim must be even, got {shape[3]}")
        for name in ("keys", "values", "queries", "attn_agg"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise TraceDataError(f"non-finite values in {name}")

    def head(self, layer: int, head: int) -> "HeadCache":
        """Extract one head's cache (states copied, nothing protected yet)."""
        T = self.seq_len
        return HeadCache(
            keys=self.keys[layer, head].copy(),
            values=self.values[layer, head].copy(),
            positions=np.arange(T, dtype=np.int64),
            protected=np.zeros(T, dtype=bool),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.keys, other.keys)
            and same(self.values, other.values)
            and same(self.queries, other.queries)
            and same(self.attn_agg, other.attn_agg)
            and self.rope_applied == other.rope_applied
            and self.source_meta == other.source_meta
        )


@dataclass
class HeadCache:
    """One attention head's cached states.

    positions are absolute token indices (strictly increasing); protected
    marks states conserved verbatim through compression.
    """

    keys: np.ndarray  # (T, d) float32
    values: np.ndarray  # (T, d) float32
    positions: np.ndarray  # (T,) int64
    protected: np.ndarray  # (T,) bool
    # How many original states each slot stands for (1 for uncompressed).
    # A merged slot carries its set size so attention can conserve the
    # softmax mass of the states it absorbed.
    counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.keys.shape != self.values.shape:
            raise TraceDataError(
                f"key/value shape mismatch: {self.keys.shape} vs {self.values.shape}"
            )
        T = self.keys.shape[0]
        if self.positions.shape != (T,) or self.protected.shape != (T,):
            raise TraceDataError("positions/protected length must match T")
        if T > 1 and not (np.diff(self.positions) > 0).all():
            raise TraceDataError("positions must be strictly increasing")
        if self.counts is not None:
            if self.counts.shape != (T,):
                raise TraceDataError("counts length must match T")
            if (self.counts < 1).any():
                raise TraceDataError("slot counts must be >= 1")

    def __len__(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class FixedSigma:
    value: float = 5.0

    def __post_init__(self) -> None:
        if not self.value > 0:
            raise ConfigError(f"fixed sigma must be > 0, got {self.value}")


@dataclass(frozen=True)
class FixedPointSigma:
    """Self-consistent sigma: iterate sigma = sum(g)/(sqrt(2)*s)."""

    init: float = 5.0
    max_iter: int = 10
    tol: float = 1e-6


@dataclass(frozen=True)
class MergeConfig:
    """Knobs for one compression run. Defaults are the 50%-budget setting."""

    epsilon: float = 0.75
    recent_frac: float = 0.17
    protect_frac: float = 0.12
    sigma_mode: FixedSigma | FixedPointSigma = field(default_factory=FixedSigma)
    value_scale: bool = True
    policy: str = "kvmerger"
    target_budget: float | None = None
    pivot_mode: str = "argmax"  # "argmax" | "random"

    def __post_init__(self) -> None:
        if not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [-1, 1], got {self.epsilon}")
        if self.recent_frac < 0 or self.protect_frac < 0:
            raise ConfigError("fractions must be non-negative")
        if self.recent_frac + self.protect_frac >= 1.0:
            raise ConfigError(
                "recent_frac + protect_frac must be < 1, got "
                f"{self.recent_frac} + {self.protect_frac}"
            )
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.pivot_mode not in ("argmax", "random"):
            raise ConfigError(f"unknown pivot_mode {self.pivot_mode!r}")
        if self.target_budget is not None and not 0.0 < self.target_budget <= 1.0:
            raise ConfigError(f"target_budget must be in (0, 1], got {self.target_budget}")

    def with_policy(self, policy: str) -> "MergeConfig":
        return replace(self, policy=policy)

    def to_dict(self) -> dict:
        if isinstance(self.sigma_mode, FixedSigma):
            sigma = {"mode": "fixed", "value": self.sigma_mode.value}
        else:
            sigma = {
                "mode": "fixed_point",
                "init": self.sigma_mode.init,
                "max_iter": self.sigma_mode.max_iter,
                "tol": self.sigma_mode.tol,
            }
        return {
            "epsilon": self.epsilon,
            "recent_frac": self.recent_frac,
            "protect_frac": self.protect_frac,
            "sigma": sigma,
            "value_scale": self.value_scale,
            "policy": self.policy,
            "target_budget": self.target_budget,
            "pivot_mode": self.pivot_mode,
        }


def synth_trace(
    layers: int,
    heads: int,
    T: int,
    d: int,
    locality: float,
    seed: int,
    with_queries: bool = True,
) -> Trace:
    """Generate a synthetic trace with a tunable key-locality knob.

    Keys follow a normalized random walk k[t+1] = normalize(k[t] + eta*g)
    with unit-Gaussian steps g, so smaller eta means higher adjacent
    cosine similarity. Keys are pre-rotation (rope_applied=False); values
    and queries are independent Gaussians.
    """
    if d % 2 != 0:
        raise ConfigError(f"head_dim must be even, got {d}")
    if T < 1 or layers < 1 or heads < 1:
        raise ConfigError("layers, heads and T must be >= 1")
    if locality < 0:
        raise ConfigError(f"locality must be >= 0, got {locality}")

    rng = np.random.default_rng(seed)
    keys = np.empty((layers, heads, T, d), dtype=np.float64)
    for l in range(layers):
        for h in range(heads):
            k = rng.standard_normal(d)
            k /= np.linalg.norm(k)
            keys[l, h, 0] = k
            if T > 1:
                steps = rng.standard_normal((T - 1, d))
                for t in range(1, T):
                    k = k + locality * steps[t - 1]
                    k /= np.linalg.norm(k)
                    keys[l, h, t] = k
    values = rng.standard_normal((layers, heads, T, d))
    queries = rng.standard_normal((layers, heads, T, d)) if with_queries else None

    trace = Trace(
        keys=keys.astype(np.float32),
        values=values.astype(np.float32),
        queries=None if queries is None else queries.astype(np.float32),
        rope_applied=False,
        source_meta=f"synth(layers={layers}, heads={heads}, T={T}, d={d}, "
        f"locality={locality}, seed={seed})",
    )
    trace.validate()
    return trace
