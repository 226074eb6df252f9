"""Median keygen/sign/verify latency for every named parameter set."""
import argparse

from bflmec import pqc
from bflmec.cli import BENCH_HEADER, bench_sig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=100)
    args = ap.parse_args()
    print(",".join(BENCH_HEADER))
    for name in pqc.PARAM_SETS:
        row = bench_sig(name, args.trials)
        print(",".join(str(row[h]) for h in BENCH_HEADER))


if __name__ == "__main__":
    main()
