"""Threshold sweep over (phi, N) on the desk preset, several seeds.

Writes one CSV per seed plus a summary of the two orderings checked by the
acceptance suite (phi=5 converges no later than phi=20; N=50 lowest at phi=20).
"""
import argparse
import csv
import math
from pathlib import Path

from bflmec.cli import SWEEP_HEADER, sweep_rows
from bflmec.config import preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-list", type=int, nargs="+", default=[50, 75, 100])
    ap.add_argument("--phi-list", type=int, nargs="+", default=[5, 10, 15, 20])
    ap.add_argument("--stride", type=int, default=0, help="0 pairs all cells of a seed")
    ap.add_argument("--out", default="results/sweep")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for seed in args.seeds:
        rows = sweep_rows(preset("threshold-sweep", seed=seed), args.n_list, args.phi_list, args.stride)
        with open(out / f"sweep_seed{seed}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_HEADER, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        cell = {(r["phi"], r["N"]): r for r in rows}
        late = lambda r: math.inf if r.get("converged_tick") is None else r["converged_tick"]
        lo, hi = min(args.phi_list), max(args.phi_list)
        faster = all(late(cell[lo, N]) <= late(cell[hi, N]) for N in args.n_list)
        accs = {N: cell[hi, N].get("final_accuracy") for N in args.n_list}
        print(f"seed {seed}: phi={lo} no later than phi={hi}: {faster}; "
              f"final accuracy at phi={hi}: " + ", ".join(f"N={N} {a:.4f}" for N, a in accs.items()))


if __name__ == "__main__":
    main()
