"""Deterministic tick-driven simulator for the client/edge protocol.

Each tick runs, in order: attacker rotation, connectivity toggling, data
arrival and ``client_tick`` for every client (ascending id), upload delivery
to the associated edge, an all-to-all pool exchange, the aggregation check on
every edge, and one bounded round of mining.  Blocks found in the same tick
are delivered in order of hashes spent (then edge id); the first one extends
every chain and the rest no longer fit the tip.

Output files (``write_outputs``):

metrics.csv
    one row per tick: ``tick,connected,training,uploads,accepted,pool,height,
    records,accuracy,malicious``; ``accuracy`` is the average client accuracy
    of the newest published global model (empty before the first one).
aggregations.csv
    one row per published global model: ``event,tick_aggregated,
    tick_published,block,pool,high,low,degenerate,eps,malicious_uploads,
    malicious_detected,accuracy``.
rewards.csv
    ``event,tick,client,reward,cumulative`` for every rewarded client.
ground_truth.csv
    ``tick,malicious_ids`` (space separated), written when an attack is configured.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, pqc
from .config import ScenarioConfig
from .fl import Dataset, Model, average_accuracy, evaluate, load_idx_dataset, make_synthetic, partition
from .incentive import LOW
from .nodes import (BlockBroadcast, ClientState, EdgeState, client_tick, edge_adopt_block,
                    edge_aggregate_if_due, edge_mine, edge_receive_upload, make_edge,
                    merge_pool_delta, pool_delta)

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 5
CONVERGENCE_DELTA = 0.005


@dataclass
class MetricsLog:
    ticks: list[dict] = field(default_factory=list)
    aggregations: list[dict] = field(default_factory=list)
    rewards: list[dict] = field(default_factory=list)
    cumulative_rewards: dict[int, float] = field(default_factory=dict)
    train_events: list[tuple[int, int]] = field(default_factory=list)
    delays: list[tuple[int, int, int | None]] = field(default_factory=list)
    malicious_truth: list[tuple[int, list[int]]] = field(default_factory=list)
    reports: list = field(default_factory=list)
    final_tick: int = 0
    n_clients: int = 0

    @property
    def accuracy_series(self) -> list[float]:
        return [a["accuracy"] for a in self.aggregations]

    def converged_at(self) -> tuple[int, int] | tuple[None, None]:
        """(event index, publish tick) of convergence, or (None, None)."""
        idx = convergence_check(self.accuracy_series)
        if idx is None:
            return None, None
        return idx, self.aggregations[idx]["tick_published"]


@dataclass
class RunResult:
    cfg: ScenarioConfig
    log: MetricsLog
    clients: list[ClientState]
    edges: list[EdgeState]
    manifest: dict
    wall_seconds: float = 0.0


# ----------------------------------------------------------------- metrics

def convergence_check(series: Sequence[float], window: int = CONVERGENCE_WINDOW,
                      delta: float = CONVERGENCE_DELTA) -> int | None:
    """Earliest index whose trailing ``window`` successive changes are all <= ``delta``."""
    run = 0
    for i in range(1, len(series)):
        # Slack absorbs float noise in values such as 0.705 - 0.700.
        if abs(series[i] - series[i - 1]) <= delta + 1e-12:
            run += 1
            if run >= window:
                return i
        else:
            run = 0
    return None


def detection_rate(log: MetricsLog, window: Sequence[int] | None = None) -> float | None:
    """Share of malicious uploads labeled low over the given aggregation events.

    Returns None when the window holds no malicious upload.
    """
    events = log.aggregations if window is None else [log.aggregations[i] for i in window]
    total = sum(e["malicious_uploads"] for e in events)
    if total == 0:
        return None
    return sum(e["malicious_detected"] for e in events) / total


def concurrency_metrics(log: MetricsLog) -> tuple[int, float, dict[int, float]]:
    """(max concurrency, average concurrency over ticks 0..T, per-client average delay)."""
    T = log.final_tick
    per_tick = np.zeros(T + 1, dtype=np.int64)
    for tick, _ in log.train_events:
        if 0 <= tick <= T:
            per_tick[tick] += 1
    tau_max = int(per_tick.max()) if len(per_tick) else 0
    tau_bar = float(per_tick.sum()) / (T + 1)
    sums: dict[int, int] = {}
    counts: dict[int, int] = {}
    for client, produced, applied in log.delays:
        end = applied if applied is not None else T
        sums[client] = sums.get(client, 0) + (end - produced)
        counts[client] = counts.get(client, 0) + 1
    tau_avg = {c: sums[c] / counts[c] for c in sorted(counts)}
    return tau_max, tau_bar, tau_avg


# ------------------------------------------------------------------ engine

def _scale_perturbation(rng: np.random.Generator, scale: float, fraction: float
                        ) -> Callable[[np.ndarray], np.ndarray]:
    def perturb(values: np.ndarray) -> np.ndarray:
        k = max(1, int(round(fraction * len(values))))
        idx = rng.choice(len(values), size=k, replace=False)
        values[idx] *= scale
        return values
    return perturb


def _load_data(cfg: ScenarioConfig, rng: np.random.Generator) -> Dataset:
    if cfg.dataset == "idx":
        return load_idx_dataset(cfg.idx_images, cfg.idx_labels, cfg.classes, limit=cfg.samples)
    return make_synthetic(cfg.samples, cfg.features, cfg.classes, cfg.separation, cfg.noise,
                          seed=int(rng.integers(2**31)))


class Simulation:
    """Holds the full state of one run; ``run()`` drives it to completion."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg.validate()
        root = np.random.SeedSequence(cfg.seed)
        data_ss, part_ss, net_ss, attack_ss, client_ss = root.spawn(5)
        if cfg.data_seed is not None:
            data_ss, part_ss = np.random.SeedSequence(cfg.data_seed).spawn(5)[:2]
        self.net_rng = np.random.default_rng(net_ss)
        self.attack_rng = np.random.default_rng(attack_ss)
        self.sig_params = pqc.get_params(cfg.sig_params)
        self.mining = cfg.mining
        self.train_cfg = cfg.train
        self.incentive_cfg = cfg.incentive

        data = _load_data(cfg, np.random.default_rng(data_ss))
        part_rng = np.random.default_rng(part_ss)
        parts = partition(data, cfg.n, cfg.partition, part_rng, cfg.shards_per_client)

        self.clients: list[ClientState] = []
        self.streams: list[Dataset] = []
        self.validation: list[Dataset] = []
        self.arrival_rngs = []
        self.train_rngs = []
        for cid, (part, css) in enumerate(zip(parts, client_ss.spawn(cfg.n)), start=1):
            key_ss, arr_ss, train_ss, split_ss = css.spawn(4)
            order = np.random.default_rng(split_ss).permutation(len(part))
            n_val = min(len(part) - 1, max(1, int(round(cfg.holdout * len(part)))))
            self.validation.append(part.subset(np.sort(order[:n_val])))
            self.streams.append(part.subset(np.sort(order[n_val:])))
            self.arrival_rngs.append(np.random.default_rng(arr_ss))
            self.train_rngs.append(np.random.default_rng(train_ss))
            keypair = pqc.keypair_gen(self.sig_params, np.random.default_rng(key_ss))
            self.clients.append(ClientState(
                id=cid, keypair=keypair, model=Model(data.n_features, data.class_count),
                buffer=Dataset.empty(data.n_features, data.class_count),
                edge_id=int(self.net_rng.integers(cfg.m))))
        registry = {c.id: c.keypair.pk.to_bytes() for c in self.clients}
        self.edges = [make_edge(e, registry, self.sig_params, self.mining) for e in range(cfg.m)]

        a = cfg.attack
        if a.mode == "rotating":
            ids = self.attack_rng.choice(cfg.n, size=a.count, replace=False) + 1
            self.malicious = set(int(i) for i in ids)
        elif a.mode == "fixed":
            self.malicious = set(a.ids)
        else:
            self.malicious = set()
        for c in self.clients:
            c.malicious = c.id in self.malicious

        self.log = MetricsLog(n_clients=cfg.n)
        self.upload_info: dict = {}
        self.pending_events: dict[bytes, dict] = {}
        self.aggregated_keys: set = set()
        self.detected_this_tick: set[int] = set()
        self.published = 0
        self.latest_accuracy: float | None = None
        self.tick = 0

    # -- per-tick phases --------------------------------------------------

    def _rotate_attackers(self) -> None:
        if self.cfg.attack.mode != "rotating" or not self.detected_this_tick:
            self.detected_this_tick = set()
            return
        for cid in sorted(self.detected_this_tick):
            if cid not in self.malicious:
                continue
            honest = sorted(set(range(1, self.cfg.n + 1)) - self.malicious - {cid})
            self.malicious.discard(cid)
            if honest:
                self.malicious.add(int(self.attack_rng.choice(honest)))
            else:
                self.malicious.add(cid)
        for c in self.clients:
            c.malicious = c.id in self.malicious
        self.detected_this_tick = set()

    def _toggle_connectivity(self) -> None:
        for c in self.clients:
            u = self.net_rng.random()
            if c.connected and u < self.cfg.p_drop:
                c.connected = False
            elif not c.connected and u < self.cfg.p_reconnect:
                c.connected = True
                c.edge_id = int(self.net_rng.integers(self.cfg.m))

    def _client_phase(self, t: int) -> list:
        uploads = []
        for i, c in enumerate(self.clients):
            stream = self.streams[i]
            arrivals = None
            if self.cfg.arrival_rate and len(stream):
                rng = self.arrival_rngs[i]
                count = int(rng.poisson(self.cfg.arrival_rate))
                arrivals = stream.subset(rng.integers(0, len(stream), size=count))
            perturb = None
            if c.malicious:
                perturb = _scale_perturbation(self.attack_rng, self.cfg.attack.scale, self.cfg.attack.fraction)
            view = self.edges[c.edge_id].chain if c.connected else None
            _, msg = client_tick(c, arrivals, view, self.cfg.cap_n, self.train_cfg, self.sig_params,
                                 self.train_rngs[i], tick=t, perturb=perturb)
            if c.trained:
                self.log.train_events.append((t, c.id))
            if msg is not None:
                uploads.append((c.edge_id, msg, list(c.uploaded_ticks), c.malicious))
        return uploads

    def _deliver_uploads(self, uploads) -> int:
        accepted = 0
        for edge_id, msg, produced, malicious in uploads:
            edge = self.edges[edge_id]
            before = len(edge.pool)
            edge_receive_upload(edge, msg)
            if len(edge.pool) > before:
                accepted += 1
                self.upload_info[msg.key] = (msg.gradient.owner_id, produced, malicious)
        return accepted

    def _exchange(self) -> None:
        deltas = [pool_delta(e) for e in self.edges]
        for e in self.edges:
            for d in deltas:
                if d.sender_id != e.id:
                    merge_pool_delta(e, d)

    def _aggregate(self, t: int) -> None:
        for e in self.edges:
            _, agg = edge_aggregate_if_due(e, self.cfg.phi, self.incentive_cfg)
            if agg is None:
                continue
            digest = agg.record.digest
            if digest in self.pending_events:
                continue
            report = agg.report
            mal_uploads = detected = 0
            for key, label in zip(agg.keys, report.entry_labels):
                owner, produced, malicious = self.upload_info[key]
                if key not in self.aggregated_keys:
                    self.aggregated_keys.add(key)
                    self.log.delays.extend((owner, p, t) for p in produced)
                if malicious:
                    mal_uploads += 1
                    if label == LOW:
                        detected += 1
                        self.detected_this_tick.add(owner)
            self.pending_events[digest] = dict(
                tick_aggregated=t, pool=len(agg.keys), high=report.entry_labels.count("high"),
                low=report.entry_labels.count(LOW), degenerate=int(report.degenerate),
                eps=report.eps, malicious_uploads=mal_uploads, malicious_detected=detected)
            self.log.reports.append(report)

    def _mine(self, t: int) -> None:
        proposals = []
        for e in self.edges:
            block, used = edge_mine(e, t, self.cfg.hash_budget, self.cfg.max_txs_per_block)
            if block is not None:
                proposals.append((used, e.id, BlockBroadcast(e.id, block).to_bytes()))
        proposals.sort(key=lambda p: (p[0], p[1]))
        for _, _, raw in proposals:
            adopted = None
            for e in self.edges:
                block = BlockBroadcast.from_bytes(raw).block
                ok, _ = edge_adopt_block(e, block)
                if ok:
                    adopted = block
            if adopted is not None and adopted.tx_first is not None:
                self._publish(adopted, t)

    def _publish(self, block, t: int) -> None:
        record = block.tx_first
        info = self.pending_events.pop(record.digest, None)
        if info is None:
            info = dict(tick_aggregated=t, pool=0, high=0, low=0, degenerate=0, eps=None,
                        malicious_uploads=0, malicious_detected=0)
        model = self.clients[0].model.with_params(record.global_gradient.values)
        acc = average_accuracy([evaluate(model, v) for v in self.validation])
        self.latest_accuracy = acc
        self.published += 1
        event = dict(event=self.published, tick_published=t, block=block.index, accuracy=acc, **info)
        self.log.aggregations.append(event)
        for cid, reward in record.reward_list:
            total = self.log.cumulative_rewards.get(cid, 0.0) + reward
            self.log.cumulative_rewards[cid] = total
            self.log.rewards.append(dict(event=self.published, tick=t, client=cid,
                                         reward=reward, cumulative=total))

    # -- driver -----------------------------------------------------------

    def step(self) -> dict:
        self.tick += 1
        t = self.tick
        self._rotate_attackers()
        self._toggle_connectivity()
        uploads = self._client_phase(t)
        accepted = self._deliver_uploads(uploads)
        self._exchange()
        self._aggregate(t)
        self._mine(t)
        if self.cfg.attack.active:
            self.log.malicious_truth.append((t, sorted(self.malicious)))
        row = dict(tick=t, connected=sum(c.connected for c in self.clients),
                   training=sum(c.trained for c in self.clients), uploads=len(uploads),
                   accepted=accepted, pool=self.edges[0].unaggregated_count,
                   height=self.edges[0].chain.height, records=self.published,
                   accuracy=self.latest_accuracy, malicious=len(self.malicious))
        self.log.ticks.append(row)
        return row

    def settle(self) -> int:
        """Mine leftover transactions without new uploads; return ticks used."""
        used = 0
        for _ in range(self.cfg.settle_ticks):
            if not any(e.pending_txs or e.pending_records for e in self.edges):
                break
            used += 1
            self._mine(self.tick + used)
        return used

    def run(self, progress: Callable[[dict], None] | None = None) -> MetricsLog:
        while self.tick < self.cfg.max_ticks and self.published < self.cfg.max_aggregations:
            row = self.step()
            if progress is not None:
                progress(row)
        self.log.final_tick = self.tick
        # Gradients never aggregated (pooled or still held by clients) count
        # toward average delay up to the last tick.
        for key, (owner, produced, _) in self.upload_info.items():
            if key not in self.aggregated_keys:
                self.log.delays.extend((owner, p, None) for p in produced)
        for c in self.clients:
            self.log.delays.extend((c.id, p, None) for p in c.pending_ticks)
        self.settle()
        return self.log


def build_manifest(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> dict:
    files = {name: name for name in ("metrics.csv", "aggregations.csv", "rewards.csv", "chain.dump")}
    if cfg.attack.active:
        files["ground_truth.csv"] = "ground_truth.csv"
    return {
        "artifact": "bflmec",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "interpretation": {
            "weight_mode": cfg.weight_mode,
            "phi_rule": "aggregate when the count of verified unaggregated gradients exceeds phi",
            "threshold_rule": "train when the local buffer holds more than N samples; buffer cleared after training",
            "difficulty": "expected hashes per block; target = 2**256 // difficulty",
            "keep_all_weights": "keep-all re-aggregates every pooled gradient with cosine weights",
            "eps": f"{cfg.eps_scale} * median distance from the provisional global to the pool" if cfg.eps is None else cfg.eps,
        },
        "outputs": files if out_dir is None else {k: str(Path(out_dir) / v) for k, v in files.items()},
    }


def run(cfg: ScenarioConfig, out_dir: str | Path | None = None,
        progress: Callable[[dict], None] | None = None) -> RunResult:
    """Execute a scenario; when ``out_dir`` is given write manifest first, outputs last."""
    cfg.validate()
    manifest = build_manifest(cfg, out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    started = time.perf_counter()
    sim = Simulation(cfg)
    sim.run(progress)
    result = RunResult(cfg, sim.log, sim.clients, sim.edges, manifest,
                       wall_seconds=time.perf_counter() - started)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])


TICK_HEADER = ["tick", "connected", "training", "uploads", "accepted", "pool", "height",
               "records", "accuracy", "malicious"]
AGG_HEADER = ["event", "tick_aggregated", "tick_published", "block", "pool", "high", "low",
              "degenerate", "eps", "malicious_uploads", "malicious_detected", "accuracy"]
REWARD_HEADER = ["event", "tick", "client", "reward", "cumulative"]


def write_outputs(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lg = result.log
    _write_csv(out / "metrics.csv", TICK_HEADER, lg.ticks)
    _write_csv(out / "aggregations.csv", AGG_HEADER, lg.aggregations)
    _write_csv(out / "rewards.csv", REWARD_HEADER, lg.rewards)
    if result.cfg.attack.active:
        _write_csv(out / "ground_truth.csv", ["tick", "malicious_ids"],
                   [dict(tick=t, malicious_ids=" ".join(map(str, ids))) for t, ids in lg.malicious_truth])
    result.edges[0].chain.dump(out / "chain.dump")
