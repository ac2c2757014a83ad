#!/usr/bin/env python3
"""Render descriptors_stage<k>.csv files as z/q/p-vs-channel line plots.

Needs matplotlib (not a package dependency; the CSVs are the contract).

    python3 scripts/plot_descriptors.py runs/analyze --out descriptors.png
"""

import argparse
import csv
import sys
from pathlib import Path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv_dir", help="directory holding descriptors_stage<k>.csv")
    parser.add_argument("--out", default="descriptors.png")
    args = parser.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = sorted(Path(args.csv_dir).glob("descriptors_stage*.csv"))
    if not paths:
        print(f"no descriptor CSVs under {args.csv_dir}", file=sys.stderr)
        return 1

    fig, axes = plt.subplots(1, len(paths), figsize=(4.5 * len(paths), 3.2))
    if len(paths) == 1:
        axes = [axes]
    for ax, path in zip(axes, paths):
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        idx = range(len(rows))
        for column, style in (("z", "C0-"), ("q", "C1-"), ("p", "C2-")):
            ax.plot(idx, [float(r[column]) for r in rows], style, label=column, lw=1.2)
        ax.set_title(path.stem.replace("descriptors_", ""))
        ax.set_xlabel("channel (sorted by q)")
        ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
