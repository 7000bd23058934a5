"""Memorize a handful of synthetic dialogues with the toy preset.

    python3 scripts/overfit_toy.py --dialogues 10 --batches 2000
"""

import argparse

from vhred.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--dialogues", type=int, default=10)
    ap.add_argument("--batches", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = overfit(args.dialogues, args.batches, args.seed)
    print(f"reconstruction per token: {r.initial:.4f} -> {r.reconstruction:.4f} "
          f"({r.batches} batches, {r.seconds:.1f}s)")


if __name__ == "__main__":
    main()
