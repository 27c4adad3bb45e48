"""Command-line entry point for trace export.

Exit codes: 0 success, 1 usage error, 2 export/model error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportError, ExportSpec, export_trace


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvtr-export",
        description="Dump decoder-LLM attention states to a KVTR trace file",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run a model over text and write a trace")
    p.add_argument("--model", required=True,
                   help="model path, or tiny-random-llama[:seed] for a "
                        "seeded random-init model with byte tokenization")
    p.add_argument("--text-file", required=True, help="UTF-8 input text file")
    p.add_argument("--out", required=True, help="output trace path (.kvtr)")
    p.add_argument("--max-seq", type=int, default=1024,
                   help="truncate the input to this many tokens (default 1024)")
    p.add_argument("--first-layer", type=int, default=0,
                   help="export layers starting at this index (default 0)")
    p.add_argument("--pre-rope", action="store_true",
                   help="capture keys before position encoding")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    text_path = Path(args.text_file)
    if not text_path.is_file():
        print(f"usage error: no such text file: {text_path}", file=sys.stderr)
        return 1
    if args.max_seq < 2:
        print(f"usage error: --max-seq must be >= 2, got {args.max_seq}",
              file=sys.stderr)
        return 1
    spec = ExportSpec(
        model=args.model,
        text=text_path.read_text(encoding="utf-8"),
        out=args.out,
        max_seq_len=args.max_seq,
        first_layer=args.first_layer,
        pre_rope=args.pre_rope,
    )
    summary = export_trace(spec)
    print(
        f"wrote {summary['out']}: {summary['layers']}x{summary['kv_heads']}"
        f"x{summary['seq_len']}x{summary['head_dim']}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except ExportError as e:
        print(f"export error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
