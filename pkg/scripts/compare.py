"""Run several methods over repeated seeds on one base config and print the KL table.

    python scripts/compare.py configs/synthetic.yaml --methods bacon-split random d-optimal --repeats 10 --out runs/syn
"""
import argparse
import logging
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from bacon.cli import load_config
from bacon.runner import compare_methods


def sign_test(wins: int, n: int) -> float:
    return binomtest(wins, n, 0.5, alternative="greater").pvalue


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config", type=Path)
    p.add_argument("--methods", nargs="+", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--T", type=int)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = load_config(args.config, T=args.T)
    comp = compare_methods([base.replace(method=m) for m in args.methods], args.repeats, args.out)
    print(comp.table())
    first, *others = args.methods
    for other in others:
        for key, better in (("kl_pt_p0", np.greater), ("kl_pt_pstar", np.less)):
            a = [r.metrics[-1].__getattribute__(key) for r in comp.runs[first]]
            b = [r.metrics[-1].__getattribute__(key) for r in comp.runs[other]]
            wins = int(np.sum(better(a, b)))
            print(f"{first} vs {other} on {key}: {wins}/{len(a)} seeds better, sign test p = "
                  f"{sign_test(wins, len(a)):.3f}")


if __name__ == "__main__":
    main()
