"""Command-line figure rendering from run artifacts."""

from __future__ import annotations

import argparse
import sys

from .io import ArtifactError
from .render import FigureJob, render, render_trajectory_strip


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fldd-plots",
                                description="render figures from run artifacts")
    sub = p.add_subparsers(dest="command", required=True)

    cu = sub.add_parser("curves", help="training curves from metrics.csv")
    cu.add_argument("--metrics", required=True)
    cu.add_argument("--out", required=True)

    pa = sub.add_parser("gmm-panels", help="2-D histograms from samples CSVs")
    pa.add_argument("--samples", nargs="+", required=True,
                    help="one CSV per panel, left to right")
    pa.add_argument("--out", required=True)
    pa.add_argument("--grid", type=int, default=None)

    st = sub.add_parser("trajectory-strip", help="tile one sample's PGM states")
    st.add_argument("--pgm-dir", required=True)
    st.add_argument("--sample", type=int, default=0)
    st.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "curves":
            render(FigureJob(kind="curves", inputs=[args.metrics], out=args.out))
            print(f"wrote {args.out}")
        elif args.command == "gmm-panels":
            render(FigureJob(kind="gmm-panels", inputs=list(args.samples),
                             out=args.out, grid=args.grid))
            print(f"wrote {args.out}")
        else:
            count = render_trajectory_strip(args.pgm_dir, args.out,
                                            sample=args.sample)
            print(f"wrote {args.out} ({count} tiles)")
    except (ArtifactError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
