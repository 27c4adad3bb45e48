"""End-to-end acceptance gate.

Each test prints a single PASS/FAIL line for its criterion (visible even
under pytest's capture) and then asserts it, so the suite doubles as a
human-readable checklist. Criteria A1-A10 cover weight normalization,
rotation similarity bounds, partition validity, oracle optimality, exact
identity cases, ratio parity, kernel smoothing, directional policy
comparisons, the pivot-selection ablation, and layer-profile stability.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from kvmerger import (
    MergeConfig,
    RopeParams,
    apply_rope,
    compare_policies,
    compress_trace,
    gaussian_weights,
    identify_merge_sets,
    oracle_optimal_partition,
    partition_objective,
    subpair_similarity,
    synth_trace,
    verify_lemma32,
)
from kvmerger.similarity import adjacent_similarities


def report(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{name}: {detail}"


def test_a1_weight_normalization(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dims = (8, 64, 128)
    sigmas = (0.5, 1.0, 5.0)
    max_key_err = 0.0
    max_val_err = 0.0
    for _ in range(10_000):
        s = int(rng.integers(1, 65))
        d = int(rng.choice(dims))
        sigma = float(rng.choice(sigmas))
        keys = rng.standard_normal((s, d))
        pivot = int(rng.integers(0, s))
        w = gaussian_weights(keys, pivot, sigma).weights
        max_key_err = max(max_key_err, abs(w.sum() - 1.0))
        max_val_err = max(max_val_err, abs((w * s).sum() - s))
    elapsed = time.perf_counter() - t0
    ok = max_key_err <= 1e-6 and max_val_err <= 1e-5 and elapsed < 10.0
    report(
        capsys,
        "A1",
        ok,
        f"10000 sets: key-sum err {max_key_err:.2e} (<=1e-6), "
        f"value-sum err {max_val_err:.2e} (<=1e-5), {elapsed:.1f}s (<10s)",
    )


def test_a2_rotation_similarity_bounds(capsys):
    t0 = time.perf_counter()
    total_violations = 0
    margins = []
    for d in (4, 64, 128):
        rep = verify_lemma32(trials=10_000, seed=0, p=RopeParams(head_dim=d))
        total_violations += rep["violations"]
        margins.append(rep["min_margin"])

    # Subpair-collinearity suite: channel pairs of two rotated copies of
    # one state sit at cos((m - n) * theta_j), independent of content.
    rng = np.random.default_rng(1)
    p = RopeParams(head_dim=16)
    max_err = 0.0
    for _ in range(200):
        x = rng.standard_normal(16)
        m, n = int(rng.integers(0, 512)), int(rng.integers(0, 512))
        u, v = apply_rope(x, m, p), apply_rope(x, n, p)
        for j in range(8):
            predicted = math.cos((m - n) * p.thetas[j])
            max_err = max(max_err, abs(subpair_similarity(u, v, j) - predicted))
    elapsed = time.perf_counter() - t0
    ok = total_violations == 0 and max_err <= 1e-6 and elapsed < 10.0
    report(
        capsys,
        "A2",
        ok,
        f"30000 bound trials, {total_violations} violations, min margins "
        f"{['%.3f' % m for m in margins]}; collinearity err {max_err:.2e} "
        f"(<=1e-6), {elapsed:.1f}s (<10s)",
    )


def test_a3_partition_validity_and_refinement(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    grid = (-1.0, 0.0, 0.5, 0.75, 0.8, 0.95, 1.0)
    bad = 0
    for _ in range(1000):
        T = int(rng.integers(2, 48))
        keys = rng.standard_normal((T, 8))
        excluded = set(
            int(i) for i in rng.choice(T, size=int(rng.integers(0, T // 2 + 1)),
                                       replace=False)
        )
        sims = adjacent_similarities(keys)
        previous = None
        for eps in grid:
            part = identify_merge_sets(keys, sorted(excluded), [], eps)
            covered = []
            for start, end in part.sets:
                covered.extend(range(start, end + 1))
                valid = all(i not in excluded for i in range(start, end + 1))
                valid &= all(sims[i] > eps for i in range(start, end))
                if not valid:
                    bad += 1
            if sorted(covered) != [i for i in range(T) if i not in excluded]:
                bad += 1
            if len(covered) != len(set(covered)):
                bad += 1
            if previous is not None:
                # Higher-threshold partitions must refine lower ones.
                for hs, he in part.sets:
                    if not any(ls <= hs and he <= le for ls, le in previous):
                        bad += 1
            previous = part.sets
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 30.0
    report(
        capsys,
        "A3",
        ok,
        f"1000 heads x {len(grid)} thresholds, {bad} invariant failures, "
        f"{elapsed:.1f}s (<30s)",
    )


def test_a4_greedy_versus_exact_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    gaps = []
    inversions = 0
    for _ in range(1000):
        T = int(rng.integers(2, 13))
        keys = rng.standard_normal((T, 4))
        eps = float(rng.uniform(-1.0, 1.0))
        greedy = identify_merge_sets(keys, [], [], eps)
        oracle = oracle_optimal_partition(keys)
        gap = partition_objective(keys, oracle) - partition_objective(keys, greedy)
        gaps.append(gap)
        if gap < -1e-9:
            inversions += 1
    gaps = np.asarray(gaps)
    elapsed = time.perf_counter() - t0
    ok = inversions == 0 and elapsed < 30.0
    report(
        capsys,
        "A4",
        ok,
        f"1000 instances (T<=12): {inversions} oracle inversions; gap "
        f"mean {gaps.mean():.3f}, median {np.median(gaps):.3f}, "
        f"max {gaps.max():.3f}, zero-gap {np.mean(gaps < 1e-9):.0%}; "
        f"{elapsed:.1f}s (<30s)",
    )


def test_a5_identity_and_degenerate_cases(capsys):
    t = synth_trace(1, 2, 512, 32, 0.0, seed=3)

    # Clause 1: the no-op policy must be bit-exact with zero perturbation.
    compressed, rep_none = compress_trace(t, MergeConfig(policy="none"))
    bit_equal = all(
        np.array_equal(compressed[0][h].keys, t.keys[0, h])
        and np.array_equal(compressed[0][h].values, t.values[0, h])
        for h in range(2)
    )
    clause1 = bit_equal and rep_none.perturbation_max == 0.0

    # Clause 2: threshold at the top of the range with no protection makes
    # every state its own set; merging singletons is the identity.
    cfg_id = MergeConfig(epsilon=1.0, recent_frac=0.0, protect_frac=0.0)
    _, rep_id = compress_trace(t, cfg_id)
    clause2 = rep_id.global_ratio == 1.0 and rep_id.perturbation_mean < 1e-6

    # Clause 3: a zero-step random walk repeats one key, so each head
    # collapses to conserved states plus a single merged slot.
    _, rep_const = compress_trace(t, MergeConfig())
    T = t.seq_len
    expected_kept = math.ceil(0.12 * T) + math.ceil(0.17 * T) + 1
    clause3 = (
        rep_const.global_ratio == pytest.approx(expected_kept / T)
        and rep_const.perturbation_mean < 1e-4
    )
    ok = clause1 and clause2 and clause3
    report(
        capsys,
        "A5",
        ok,
        f"no-op bit-equal={bit_equal} pert={rep_none.perturbation_max:.1e}; "
        f"identity-merge ratio={rep_id.global_ratio} "
        f"pert={rep_id.perturbation_mean:.1e} (<1e-6); constant-key kept="
        f"{rep_const.global_ratio * T:.0f}/{expected_kept} "
        f"pert={rep_const.perturbation_mean:.1e} (<1e-4)",
    )


def test_a6_ratio_parity_and_target_budget(capsys):
    rng = np.random.default_rng(4)

    # Key and value caches always shrink in lockstep.
    parity_ok = True
    t = synth_trace(1, 2, 128, 16, 0.1, seed=0)
    for policy in ("kvmerger", "avg_merge", "h2o", "recent_only", "none"):
        compressed, _ = compress_trace(t, MergeConfig(epsilon=0.9, policy=policy))
        for row in compressed:
            for cache in row:
                parity_ok &= cache.keys.shape[0] == cache.values.shape[0]

    misses = 0
    worst = 0.0
    for i in range(100):
        eta = float(rng.uniform(0.02, 0.3))
        target = float(rng.uniform(0.35, 0.9))
        trace = synth_trace(1, 2, 256, 16, eta, seed=1000 + i)
        _, rep = compress_trace(trace, MergeConfig(target_budget=target))
        err = abs(rep.global_ratio - target)
        worst = max(worst, err)
        if err > 0.01:
            misses += 1
    ok = parity_ok and misses == 0
    report(
        capsys,
        "A6",
        ok,
        f"key/value parity={parity_ok}; budget mode {misses}/100 misses, "
        f"worst error {worst:.4f} (<=0.01)",
    )


def test_a7_kernel_width_smooths_weights(capsys):
    rng = np.random.default_rng(5)
    grid = (0.5, 1.0, 2.0, 5.0)
    non_monotone = 0
    checked = 0
    for _ in range(1000):
        s = int(rng.integers(3, 17))
        d = int(rng.choice((8, 16, 64)))
        keys = rng.standard_normal((s, d))
        pivot = int(rng.integers(0, s))
        dists = np.linalg.norm(keys - keys[pivot], axis=1)
        if np.unique(np.round(dists, 12)).size < 2:
            continue
        checked += 1
        entropies = []
        for sigma in grid:
            w = gaussian_weights(keys, pivot, sigma).weights
            w = w[w > 0]
            entropies.append(float(-(w * np.log(w)).sum()))
        if not all(entropies[i] < entropies[i + 1] for i in range(len(grid) - 1)):
            non_monotone += 1
    ok = non_monotone == 0 and checked >= 1000 * 0.95
    report(
        capsys,
        "A7",
        ok,
        f"{checked} sets with >=2 distinct distances: {non_monotone} "
        f"entropy-order failures across sigma {grid}",
    )


@pytest.fixture(scope="module")
def directional_sweep():
    """20-seed policy comparison at matched 50% budget, shared by A8/A9."""
    t0 = time.perf_counter()
    rows = []
    for seed in range(20):
        t = synth_trace(2, 4, 512, 32, 0.05, seed=seed)
        cfg = MergeConfig(target_budget=0.5)
        reports = {
            r.policy: r
            for r in compare_policies(t, ["kvmerger", "avg_merge", "h2o"], cfg,
                                      seeds=[seed])
        }
        _, rand = compress_trace(
            t, MergeConfig(target_budget=0.5, pivot_mode="random"), seed=seed
        )
        rows.append(
            {
                "kvmerger": reports["kvmerger"].perturbation_mean,
                "avg_merge": reports["avg_merge"].perturbation_mean,
                "h2o": reports["h2o"].perturbation_mean,
                "random_pivot": rand.perturbation_mean,
                "ratio": reports["kvmerger"].global_ratio,
            }
        )
    return rows, time.perf_counter() - t0


def test_a8_kernel_merging_beats_uniform_merging(capsys, directional_sweep):
    rows, elapsed = directional_sweep
    beats_avg = sum(r["kvmerger"] < r["avg_merge"] for r in rows)
    beats_h2o = sum(r["kvmerger"] < r["h2o"] for r in rows)
    ratios = [r["ratio"] for r in rows]
    budget_ok = all(abs(x - 0.5) <= 0.01 for x in ratios)
    # One-sided sign test at alpha = 0.05: 15 of 20 wins rejects the
    # even-chances null (P(X >= 15) ~ 0.021 under Binomial(20, 1/2)).
    ok = beats_avg >= 15 and budget_ok and elapsed < 300.0
    report(
        capsys,
        "A8",
        ok,
        f"gaussian<uniform on {beats_avg}/20 seeds (need >=15); "
        f"gaussian<heavy-hitter on {beats_h2o}/20 (documented); "
        f"budget 0.50+/-0.01 held={budget_ok}; {elapsed:.0f}s (<300s)",
    )


def test_a9_random_pivot_is_no_better(capsys, directional_sweep):
    rows, _ = directional_sweep
    wins = sum(r["random_pivot"] >= r["kvmerger"] for r in rows)
    mean_gap = float(np.mean([r["random_pivot"] - r["kvmerger"] for r in rows]))
    ok = wins >= 15
    report(
        capsys,
        "A9",
        ok,
        f"random-pivot >= argmax-pivot perturbation on {wins}/20 seeds "
        f"(need >=15), mean gap {mean_gap:+.2e}",
    )


def test_a10_layer_profiles_persist_across_seeds(capsys):
    from kvmerger import layer_compression_profile

    cfg = MergeConfig(epsilon=0.96)
    worst = 0.0
    for a, b in [(0, 1), (5, 6), (11, 12)]:
        p1 = layer_compression_profile(synth_trace(3, 4, 256, 32, 0.05, seed=a), cfg)
        p2 = layer_compression_profile(synth_trace(3, 4, 256, 32, 0.05, seed=b), cfg)
        worst = max(worst, float(np.max(np.abs(p1 - p2))))
    ok = worst <= 0.05
    report(
        capsys,
        "A10",
        ok,
        f"3 same-locality seed pairs: max elementwise layer-ratio gap "
        f"{worst:.4f} (<=0.05)",
    )
