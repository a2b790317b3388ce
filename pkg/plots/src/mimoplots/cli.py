"""Command line front end: mimoplot --fig N --in DIR --out DIR [--format F].

Exit codes: 0 done, 1 input data violates the artifact contract,
2 bad usage, 3 the output location cannot be written.
"""

from __future__ import annotations

import argparse
import sys

from .figures import FIGURES, FORMATS, render
from .io import ContractError

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_USAGE = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mimoplot",
        description="Render standard figures from simulator CSV artifacts.",
    )
    p.add_argument("--fig", type=int, required=True, choices=FIGURES,
                   help="which figure to render")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR",
                   help="artifact directory (summary.csv / trace_*.csv)")
    p.add_argument("--out", dest="out_dir", required=True, metavar="DIR",
                   help="directory for the rendered figure")
    p.add_argument("--format", default="png", choices=FORMATS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        out = render(args.fig, args.in_dir, args.out_dir, args.format)
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
