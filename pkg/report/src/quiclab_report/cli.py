"""CLI: render the standard figure set from a dataset.

    quiclab-report --in dataset.jsonl --figures out/
"""

from __future__ import annotations

import argparse
import sys

from .render import FIGURE_KINDS, FigureSpec, render, render_all


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quiclab-report", description="render figures from a measurement dataset"
    )
    parser.add_argument("--in", dest="infile", required=True, help="dataset JSONL path")
    parser.add_argument("--figures", required=True, help="output directory")
    parser.add_argument(
        "--kind", choices=FIGURE_KINDS, action="append",
        help="render only the given kind(s); default: all",
    )
    parser.add_argument("--profiles", nargs="*", default=[], help="profile filter")
    parser.add_argument("--pages", nargs="*", default=[], help="page filter")
    parser.add_argument("--combos", nargs="*", default=[], help="combo filter")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.kind:
        results = []
        for kind in args.kind:
            suffix = "md" if kind == "summary_md" else "png"
            spec = FigureSpec(
                kind=kind,
                output_path=f"{args.figures}/{kind}.{suffix}",
                profiles=args.profiles,
                pages=args.pages,
                combos=args.combos,
            )
            results.append(render(args.infile, spec))
    else:
        results = render_all(args.infile, args.figures)
    for result in results:
        print(result.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
