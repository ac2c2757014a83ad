#!/usr/bin/env python3
"""Train baseline / se / csa with a shared seed and print the comparison table.

Thin wrapper over `csanet compare`; everything lands under --out
(per-variant metrics, checkpoints, descriptor CSVs for the csa model,
comparison.json with the cross-stage |q| trend).
"""

import argparse
import sys

from csanet.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk_comparison")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--limit", type=int, default=None)
    args = parser.parse_args()

    argv = ["compare", "--dataset", "synthetic", "--seed", str(args.seed),
            "--epochs", str(args.epochs), "--out", args.out]
    if args.limit is not None:
        argv += ["--limit", str(args.limit)]
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
