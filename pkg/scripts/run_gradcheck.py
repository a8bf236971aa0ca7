#!/usr/bin/env python3
"""Finite-difference gradient audit over all cell types.

Usage: python3 scripts/run_gradcheck.py [--seeds 20] [--cells gru lstm ...]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from seqfed.cells import CellKind
from seqfed.gradcheck import run_gradcheck


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--cells", nargs="*",
                    default=[k.value for k in CellKind])
    args = ap.parse_args()
    kinds = [CellKind(c) for c in args.cells]
    ok = run_gradcheck(kinds, n_seeds=args.seeds,
                       report=lambda line: print(line))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
