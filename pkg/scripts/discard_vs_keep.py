"""Discard-low against keep-all on the same seeds."""
import argparse

from bflmec import sim
from bflmec.config import preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    print("seed,strategy,converged_event,converged_tick,final_accuracy,low_fraction")
    for seed in args.seeds:
        for strategy in ("discard-low", "keep-all"):
            lg = sim.run(preset("discard-vs-keep", seed=seed, strategy=strategy)).log
            event, tick = lg.converged_at()
            pooled = sum(a["pool"] for a in lg.aggregations)
            low = sum(a["low"] for a in lg.aggregations) / pooled if pooled else 0.0
            print(f"{seed},{strategy},{event},{tick},{lg.accuracy_series[-1]:.4f},{low:.3f}")


if __name__ == "__main__":
    main()
