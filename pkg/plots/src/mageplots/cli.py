"""Standalone renderer: one figure per invocation."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import KINDS, FigureSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="render")
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="csv_path", required=True,
                        help="input CSV from the simulator CLI")
    parser.add_argument("--out", dest="out_path", required=True,
                        help="output image; a <out>.json sidecar is written too")
    parser.add_argument("--title", default="")
    args = parser.parse_args(argv)
    try:
        spec = FigureSpec(kind=args.kind, csv_path=Path(args.csv_path),
                          out_path=Path(args.out_path), title=args.title)
        render(spec)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    print(f"render: wrote {args.out_path} and {args.out_path}.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
