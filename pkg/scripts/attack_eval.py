"""Detection-rate curves (rotating attackers) and reward separation (fixed set)."""
import argparse
from pathlib import Path

from bflmec import sim
from bflmec.cli import attack_eval
from bflmec.config import preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--aggregations", type=int, default=10)
    ap.add_argument("--out", default="results/attack")
    args = ap.parse_args()
    for name in ("attack-iid", "attack-noniid", "attack-fixed"):
        res = attack_eval(preset(name, seed=args.seed), Path(args.out) / name, args.aggregations)
        lg = res["result"].log
        n = len(lg.aggregations)
        rates = [d["rate"] for d in res["detection"]]
        print(f"{name}: per-window rate {rates}")
        print(f"  final 3 windows {sim.detection_rate(lg, range(max(0, n - 3), n))}")
        rewards = {r["client"]: round(r["cumulative_reward"], 2) for r in res["rewards"]}
        print(f"  cumulative rewards {rewards}")


if __name__ == "__main__":
    main()
