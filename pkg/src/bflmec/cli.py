"""Command-line entry points: run, sweep, bench-sig, attack-eval, dump-chain.

Exit codes: 0 success, 2 bad configuration or unreadable input, 3 training
diverged.  Tables go to stdout (or ``--out``) as comma-separated text.
Flags override scenario-file values.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import pqc, sim
from .config import PRESETS, ConfigError, ScenarioConfig, load_scenario, preset
from .fl import DivergenceError
from .ledger import Chain

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

SWEEP_HEADER = ["phi", "N", "seed", "final_accuracy", "converged_event", "converged_tick",
                "aggregations", "status"]
BENCH_HEADER = ["params", "trials", "Keygen (ms)", "Sign (ms)", "Verify (ms)"]

# flag -> ScenarioConfig field
_OVERRIDES = {"phi": "phi", "cap_n": "cap_n", "seed": "seed", "n": "n", "m": "m",
              "max_ticks": "max_ticks", "max_aggregations": "max_aggregations",
              "strategy": "strategy", "partition": "partition", "difficulty": "difficulty"}


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", nargs="?", help="YAML scenario file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--phi", type=int)
    p.add_argument("--cap-n", type=int, help="local data threshold N")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="client count")
    p.add_argument("--m", type=int, help="edge count")
    p.add_argument("--max-ticks", type=int)
    p.add_argument("--max-aggregations", type=int)
    p.add_argument("--strategy", choices=["discard-low", "keep-all"])
    p.add_argument("--partition", choices=["iid", "label-skew"])
    p.add_argument("--difficulty", type=int)


def load_config(args: argparse.Namespace) -> ScenarioConfig:
    if args.scenario and args.preset:
        raise ConfigError("give a scenario file or --preset, not both")
    if args.scenario:
        cfg = load_scenario(args.scenario)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ScenarioConfig()
    changes = {field: getattr(args, flag) for flag, field in _OVERRIDES.items()
               if getattr(args, flag, None) is not None}
    try:
        cfg = cfg.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if row.get(h) is None else row[h] for h in header])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def sweep_rows(cfg: ScenarioConfig, n_list, phi_list, stride: int = 1) -> list[dict]:
    """One run per (phi, N) cell, phi-major.

    Cell k runs with seed ``cfg.seed + stride * k``; every cell shares the
    dataset and partition of the base seed.  ``stride=0`` gives paired cells
    (common random numbers).
    """
    rows = []
    cells = [(phi, N) for phi in phi_list for N in n_list]
    data_seed = cfg.data_seed if cfg.data_seed is not None else cfg.seed
    for k, (phi, N) in enumerate(cells):
        seed = cfg.seed + stride * k
        row = dict(phi=phi, N=N, seed=seed)
        try:
            result = sim.run(cfg.replace(phi=phi, cap_n=N, seed=seed, data_seed=data_seed))
        except (DivergenceError, ConfigError, ValueError) as exc:
            row["status"] = f"failed: {exc}".replace(",", ";")
            rows.append(row)
            continue
        lg = result.log
        event, tick = lg.converged_at()
        acc = lg.accuracy_series
        row.update(final_accuracy=acc[-1] if acc else None, converged_event=event,
                   converged_tick=tick, aggregations=len(acc), status="ok")
        rows.append(row)
    return rows


def bench_sig(params_name: str, trials: int, seed: int = 0) -> dict:
    if trials <= 0:
        raise ValueError("trials must be positive")
    params = pqc.get_params(params_name)
    rng = np.random.default_rng(seed)
    keygen, sign, verify = [], [], []
    for i in range(trials):
        msg = f"bench-{i}".encode()
        t0 = time.perf_counter()
        kp = pqc.keypair_gen(params, rng)
        t1 = time.perf_counter()
        sig = pqc.sign(kp.sk, msg, params, rng)
        t2 = time.perf_counter()
        ok = pqc.verify(kp.pk, msg, sig, params)
        t3 = time.perf_counter()
        if not ok:
            raise RuntimeError("benchmark signature failed to verify")
        keygen.append(t1 - t0)
        sign.append(t2 - t1)
        verify.append(t3 - t2)
    ms = lambda xs: round(statistics.median(xs) * 1e3, 4)
    return {"params": params.name, "trials": trials, "Keygen (ms)": ms(keygen),
            "Sign (ms)": ms(sign), "Verify (ms)": ms(verify)}


def attack_eval(cfg: ScenarioConfig, out_dir: str | Path, aggregations: int = 10) -> dict:
    """Run an attack scenario for ``aggregations`` events and write the tables."""
    if not cfg.attack.active:
        raise ConfigError("no attack profile in scenario")
    result = sim.run(cfg.replace(max_aggregations=aggregations), out_dir=out_dir)
    lg = result.log
    out = Path(out_dir)
    curve = []
    for i, agg in enumerate(lg.aggregations):
        curve.append(dict(event=agg["event"], tick=agg["tick_published"],
                          malicious_uploads=agg["malicious_uploads"],
                          malicious_detected=agg["malicious_detected"],
                          rate=sim.detection_rate(lg, [i])))
    (out / "detection.csv").write_text(_table(
        ["event", "tick", "malicious_uploads", "malicious_detected", "rate"], curve))
    final_truth = set(lg.malicious_truth[-1][1]) if lg.malicious_truth else set()
    table = [dict(client=c, cumulative_reward=lg.cumulative_rewards.get(c, 0.0),
                  malicious_at_end=int(c in final_truth)) for c in range(1, cfg.n + 1)]
    (out / "cumulative_rewards.csv").write_text(_table(
        ["client", "cumulative_reward", "malicious_at_end"], table))
    return dict(detection=curve, rewards=table, result=result)


# ------------------------------------------------------------------ parser

def cmd_run(args) -> int:
    cfg = load_config(args)
    result = sim.run(cfg, out_dir=args.out)
    lg = result.log
    event, tick = lg.converged_at()
    acc = lg.accuracy_series
    print(f"ticks={lg.final_tick} aggregations={len(acc)} "
          f"final_accuracy={acc[-1] if acc else float('nan'):.4f} "
          f"converged_event={event} converged_tick={tick} out={args.out}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    rows = sweep_rows(cfg, args.n_list, args.phi_list, stride=args.stride)
    _emit(_table(SWEEP_HEADER, rows), args.out)
    return EXIT_OK


def cmd_bench_sig(args) -> int:
    try:
        row = bench_sig(args.params, args.trials, args.seed)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    _emit(_table(BENCH_HEADER, [row]), args.out)
    return EXIT_OK


def cmd_attack_eval(args) -> int:
    cfg = load_config(args)
    res = attack_eval(cfg, args.out, args.aggregations)
    sys.stdout.write(_table(["event", "tick", "malicious_uploads", "malicious_detected", "rate"],
                            res["detection"]))
    sys.stdout.write(_table(["client", "cumulative_reward", "malicious_at_end"], res["rewards"]))
    return EXIT_OK


def cmd_dump_chain(args) -> int:
    from .ledger import MiningParams
    path = Path(args.path)
    if path.is_dir():
        path = path / "chain.dump"
    difficulty = args.difficulty
    manifest = path.parent / "manifest"
    if difficulty is None and manifest.exists():
        difficulty = json.loads(manifest.read_text())["config"]["difficulty"]
    params = MiningParams(difficulty=difficulty or 2**20)
    try:
        chain = Chain.load(path, params)
    except OSError as exc:
        raise ConfigError(f"cannot read chain dump {path}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed chain dump {path}: {exc}") from None
    if args.validate:
        ok, reason = chain.validate()
        print(f"{'valid' if ok else 'invalid'} height={chain.height} {reason}".rstrip())
        return EXIT_OK if ok else 1
    for line in chain.dump_lines():
        sys.stdout.write(line + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bflmec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _add_scenario_args(p)
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over N and phi")
    _add_scenario_args(p)
    p.add_argument("--n-list", type=_int_list, default=[50, 75, 100])
    p.add_argument("--phi-list", type=_int_list, default=[5, 10, 15, 20])
    p.add_argument("--stride", type=int, default=1, help="seed offset per cell; 0 pairs all cells")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-sig", help="median signature latencies")
    p.add_argument("--params", default="mini", choices=sorted(pqc.PARAM_SETS))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_sig)

    p = sub.add_parser("attack-eval", help="detection curve and cumulative rewards")
    _add_scenario_args(p)
    p.add_argument("--aggregations", type=int, default=10)
    p.add_argument("--out", default="out-attack")
    p.set_defaults(func=cmd_attack_eval)

    p = sub.add_parser("dump-chain", help="print or validate a chain dump")
    p.add_argument("path", help="chain.dump file or run directory")
    p.add_argument("--validate", action="store_true")
    p.add_argument("--difficulty", type=int, help="defaults to the run manifest's value")
    p.set_defaults(func=cmd_dump_chain)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BrokenPipeError:
        # Output piped into e.g. head; silence the flush at interpreter exit.
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
