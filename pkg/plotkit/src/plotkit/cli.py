"""Command line: plotkit --figure fig1 --in sweep.csv --out fig1.png

Exit codes: 0 full success, 2 bad arguments or missing inputs/columns,
3 partial success (optional columns missing, curves omitted), 1 other
runtime failure.
"""

import argparse
import sys

from .figures import FIGURE_IDS, FigureSpec, MissingColumn, render


def build_parser():
    parser = argparse.ArgumentParser(prog="plotkit",
                                     description="render benchmark figures from CSVs")
    parser.add_argument("--figure", required=True, choices=FIGURE_IDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV paths (harness schemas)")
    parser.add_argument("--out", required=True, help="output image path (png/svg/pdf)")
    parser.add_argument("--dpi", type=int, default=120)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    spec = FigureSpec(figure=args.figure, inputs=args.inputs, output=args.out,
                      style={"dpi": args.dpi})
    try:
        result = render(spec)
    except (MissingColumn, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - tool boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote {result.path} checksum {result.value_checksum[:16]}")
    return 3 if result.warnings else 0


if __name__ == "__main__":
    sys.exit(main())
