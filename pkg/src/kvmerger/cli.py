"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant
violation. Reports are JSON; tabular exports are CSV with a header row.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .attention import prepare_head
from .errors import (
    ConfigError,
    InvariantViolation,
    KVMergerError,
    TraceCorruptionError,
    TraceDataError,
    TraceFormatError,
)
from .metrics import compare_policies, compress_trace
from .model import FixedPointSigma, FixedSigma, MergeConfig, POLICIES, synth_trace
from .rope import RopeParams, verify_lemma32
from .similarity import (
    layer_compression_profile,
    similarity_profile,
    write_adjacent_csv,
    write_heatmap_csv,
    write_layer_profile_csv,
)
from .traceio import load_trace, save_trace

USAGE_ERROR = 1
DATA_ERROR = 2
INVARIANT_ERROR = 3


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, default=0.75,
                   help="adjacent-similarity threshold (default 0.75)")
    p.add_argument("--recent-frac", type=float, default=0.17,
                   help="fraction of recent tokens kept verbatim (default 0.17)")
    p.add_argument("--protect-frac", type=float, default=0.12,
                   help="fraction of top-scoring tokens kept verbatim (default 0.12)")
    p.add_argument("--sigma", type=float, default=5.0,
                   help="fixed Gaussian kernel width (default 5)")
    p.add_argument("--sigma-fixed-point", action="store_true",
                   help="resolve sigma per set by fixed-point iteration instead")
    p.add_argument("--no-value-scale", action="store_true",
                   help="disable the set-size factor on merged value states")
    p.add_argument("--pivot-mode", choices=["argmax", "random"], default="argmax",
                   help="pivot selection rule (default argmax)")
    p.add_argument("--target-budget", type=float, default=None,
                   help="kept ratio to hit by threshold bisection (overrides --epsilon)")


def _config_from_args(args, policy: str | None = None) -> MergeConfig:
    sigma = (
        FixedPointSigma(init=args.sigma)
        if args.sigma_fixed_point
        else FixedSigma(value=args.sigma)
    )
    return MergeConfig(
        epsilon=args.epsilon,
        recent_frac=args.recent_frac,
        protect_frac=args.protect_frac,
        sigma_mode=sigma,
        value_scale=not args.no_value_scale,
        policy=policy if policy is not None else args.policy,
        target_budget=args.target_budget,
        pivot_mode=args.pivot_mode,
    )


def cmd_synth(args) -> int:
    trace = synth_trace(
        layers=args.layers, heads=args.heads, T=args.seq, d=args.dim,
        locality=args.locality, seed=args.seed,
    )
    save_trace(trace, args.out)
    print(f"wrote {args.out}: {args.layers}x{args.heads}x{args.seq}x{args.dim}")
    return 0


def cmd_analyze(args) -> int:
    trace = load_trace(args.trace)
    if not 0 <= args.layer < trace.num_layers or not 0 <= args.head < trace.num_heads:
        raise ConfigError(
            f"layer/head ({args.layer},{args.head}) out of range for "
            f"{trace.num_layers}x{trace.num_heads}"
        )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    cache, _ = prepare_head(trace, args.layer, args.head)
    profile = similarity_profile(cache.keys, full=args.full)
    write_adjacent_csv(outdir / "adjacent.csv", profile.adjacent_sims)
    if args.full:
        write_heatmap_csv(outdir / "heatmap.csv", profile.full_matrix)

    cfg = _config_from_args(args, policy="kvmerger")
    ratios = layer_compression_profile(trace, cfg)
    write_layer_profile_csv(outdir / "layer_profile.csv", ratios)
    print(
        f"adjacent sim mean={profile.mean:.4f} min={profile.min:.4f} "
        f"max={profile.max:.4f}; wrote CSVs to {outdir}"
    )
    return 0


def cmd_compress(args) -> int:
    trace = load_trace(args.trace)
    cfg = _config_from_args(args)
    compressed, report = compress_trace(trace, cfg, seed=args.seed)

    # Self-checks: key/value parity and ratio bounds.
    for row in compressed:
        for cache in row:
            if cache.keys.shape != cache.values.shape:
                raise InvariantViolation("key/value count mismatch in compressed head")
    if not 0.0 < report.global_ratio <= 1.0:
        raise InvariantViolation(f"global ratio {report.global_ratio} out of (0, 1]")
    if cfg.policy == "none" and report.perturbation_max != 0.0:
        raise InvariantViolation("policy none must produce zero perturbation")

    _write_json(args.out, report.to_dict())
    return 0


def cmd_compare(args) -> int:
    trace = load_trace(args.trace)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    cfg = _config_from_args(args, policy="kvmerger")
    reports = compare_policies(trace, policies, cfg, seeds=seeds)

    ratios = [r.global_ratio for r in reports if r.policy != "none"]
    if ratios and max(ratios) - min(ratios) > 0.01:
        raise InvariantViolation(
            f"ratio parity violated across policies: {min(ratios)}..{max(ratios)}"
        )
    _write_json(args.out, [r.to_dict() for r in reports])
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("policy,seed,global_ratio,perturbation_mean,perturbation_max\n")
            for r in reports:
                f.write(
                    f"{r.policy},{r.seed},{r.global_ratio!r},"
                    f"{r.perturbation_mean!r},{r.perturbation_max!r}\n"
                )
    return 0


def cmd_verify_rope(args) -> int:
    report = verify_lemma32(
        trials=args.trials, seed=args.seed,
        p=RopeParams(head_dim=args.dim, base=args.base),
    )
    _write_json(args.out, report)
    if report["violations"]:
        raise InvariantViolation(f"{report['violations']} similarity-bound violations")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvmerger", description="KV-cache compression laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trace")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seq", type=int, default=256)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--locality", type=float, default=0.1,
                   help="key random-walk step size (0 = identical keys)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="similarity profiles and layer ratios")
    p.add_argument("--trace", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--full", action="store_true", help="also export the full T x T map")
    p.add_argument("--outdir", default="analysis")
    _add_config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compress", help="compress a trace and report perturbation")
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", choices=list(POLICIES), default="kvmerger")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("compare", help="run several policies at matched budget")
    p.add_argument("--trace", required=True)
    p.add_argument("--policies", default="kvmerger,avg_merge,h2o")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.add_argument("--csv", default=None, help="optional per-run CSV table")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-rope", help="stress-test rotation similarity bounds")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_verify_rope)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else USAGE_ERROR
    try:
        return args.func(args)
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return INVARIANT_ERROR
    except (TraceFormatError, TraceCorruptionError, TraceDataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    except (ConfigError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except KVMergerError as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
