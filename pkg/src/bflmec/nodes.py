"""Client and edge-node state machines plus their wire messages.

Wire records (little-endian, u32 length prefixes):

* upload:      b"UPLD" | len | gradient bytes | len | signature | len | public key
* pool delta:  b"POOL" | sender edge | count | count x (receiver edge | len | upload record)
* block:       b"BLCK" | sender edge | len | block bytes (header + body, see ``ledger``)

Gradient bytes are ``GradientVector.to_bytes()``: owner u32, round tag u32,
dimension u32, then float64 values.  That byte string is also the signed
message.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import pqc
from .fl import Dataset, GradientVector, Model, TrainConfig, local_update, simple_average
from .incentive import ContributionReport, IncentiveConfig, identify_contributions
from .ledger import Block, BlockTemplate, Chain, GlobalRecord, MiningParams, Transaction, mine

log = logging.getLogger(__name__)


def _take(data: bytes, offset: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<I", data, offset)
    offset += 4
    chunk = data[offset:offset + n]
    if len(chunk) != n:
        raise ValueError("truncated record")
    return bytes(chunk), offset + n


def _lp(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


@dataclass
class UploadMessage:
    gradient: GradientVector
    signature: bytes
    public_key: bytes

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.gradient.to_bytes()).digest()

    @property
    def key(self) -> tuple[int, bytes]:
        return (self.gradient.owner_id, self.digest)

    def to_bytes(self) -> bytes:
        return b"UPLD" + _lp(self.gradient.to_bytes()) + _lp(self.signature) + _lp(self.public_key)

    @classmethod
    def read(cls, data: bytes, offset: int = 0) -> tuple["UploadMessage", int]:
        if data[offset:offset + 4] != b"UPLD":
            raise ValueError("not an upload record")
        grad, offset = _take(data, offset + 4)
        sig, offset = _take(data, offset)
        pk, offset = _take(data, offset)
        return cls(GradientVector.from_bytes(grad), sig, pk), offset

    @classmethod
    def from_bytes(cls, data: bytes) -> "UploadMessage":
        msg, end = cls.read(data)
        if end != len(data):
            raise ValueError("trailing bytes after upload")
        return msg


@dataclass
class PoolEntry:
    upload: UploadMessage
    receiver_id: int

    @property
    def key(self):
        return self.upload.key

    @property
    def transaction(self) -> Transaction:
        return Transaction(self.upload.gradient.owner_id, self.receiver_id,
                           self.upload.digest, self.upload.signature)


@dataclass
class PoolDelta:
    sender_id: int
    entries: list[PoolEntry]

    def to_bytes(self) -> bytes:
        out = [b"POOL", struct.pack("<II", self.sender_id, len(self.entries))]
        for e in self.entries:
            out.append(struct.pack("<I", e.receiver_id) + _lp(e.upload.to_bytes()))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoolDelta":
        if data[:4] != b"POOL":
            raise ValueError("not a pool-delta record")
        sender, count = struct.unpack_from("<II", data, 4)
        offset = 12
        entries = []
        for _ in range(count):
            (receiver,) = struct.unpack_from("<I", data, offset)
            raw, offset = _take(data, offset + 4)
            entries.append(PoolEntry(UploadMessage.from_bytes(raw), receiver))
        if offset != len(data):
            raise ValueError("trailing bytes after pool delta")
        return cls(sender, entries)


@dataclass
class BlockBroadcast:
    sender_id: int
    block: Block

    def to_bytes(self) -> bytes:
        return b"BLCK" + struct.pack("<I", self.sender_id) + _lp(self.block.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockBroadcast":
        if data[:4] != b"BLCK":
            raise ValueError("not a block record")
        (sender,) = struct.unpack_from("<I", data, 4)
        raw, end = _take(data, 8)
        if end != len(data):
            raise ValueError("trailing bytes after block")
        return cls(sender, Block.from_bytes(raw))


# ------------------------------------------------------------------ client

@dataclass
class ClientState:
    id: int
    keypair: pqc.LatticeKeypair
    model: Model
    buffer: Dataset
    anchor: int = 0
    pending: list[GradientVector] = field(default_factory=list)
    pending_ticks: list[int] = field(default_factory=list)
    connected: bool = True
    edge_id: int = 0
    malicious: bool = False
    records_seen: int = 0
    # Per-tick observations for the simulator.
    trained: bool = False
    uploaded_ticks: list[int] = field(default_factory=list)


def client_tick(state: ClientState, arrivals: Dataset | None, chain_view: Chain | None, N: int,
                cfg: TrainConfig, sig_params: pqc.LatticeParams, rng: np.random.Generator,
                tick: int = 0,
                perturb: Callable[[np.ndarray], np.ndarray] | None = None
                ) -> tuple[ClientState, UploadMessage | None]:
    """One step of the client loop.

    Train when the buffer holds strictly more than ``N`` samples (after
    reading the newest global model, if the chain is reachable), then upload
    the mean of all unsent results when connected.
    """
    state.trained = False
    state.uploaded_ticks = []
    if arrivals is not None and len(arrivals):
        state.buffer = state.buffer.concat(arrivals)

    if len(state.buffer) > N:
        if chain_view is not None and state.anchor <= chain_view.height:
            found = chain_view.scan_for_global(state.anchor)
            if found is not None:
                index, record = found
                state.records_seen += sum(1 for b in chain_view[state.anchor + 1:index + 1]
                                          if b.tx_first is not None)
                state.anchor = index
                state.model = state.model.with_params(record.global_gradient.values)
        result = local_update(state.model, state.buffer, cfg, rng,
                              owner_id=state.id, round_tag=state.records_seen)
        state.model = state.model.with_params(result.values)
        state.pending.append(result)
        state.pending_ticks.append(tick)
        state.buffer = Dataset.empty(state.buffer.n_features, state.buffer.class_count)
        state.trained = True

    if state.connected and state.pending:
        w = simple_average(state.pending) if len(state.pending) > 1 else state.pending[0]
        values = w.values if perturb is None else perturb(w.values.copy())
        grad = GradientVector(values, owner_id=state.id, round_tag=state.records_seen)
        sig = pqc.sign(state.keypair.sk, grad.to_bytes(), sig_params, rng)
        msg = UploadMessage(grad, sig.to_bytes(), state.keypair.pk.to_bytes())
        state.uploaded_ticks = list(state.pending_ticks)
        state.pending = []
        state.pending_ticks = []
        return state, msg
    return state, None


# -------------------------------------------------------------------- edge

@dataclass
class Aggregation:
    record: GlobalRecord
    report: ContributionReport
    keys: list[tuple[int, bytes]]
    simple_global: GradientVector


@dataclass
class EdgeState:
    id: int
    chain: Chain
    registry: dict[int, bytes]
    sig_params: pqc.LatticeParams
    pool: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    outbox: list = field(default_factory=list)
    unaggregated_count: int = 0
    pending_txs: dict = field(default_factory=dict)
    pending_records: list = field(default_factory=list)
    nonce_cursor: int = 0
    template: BlockTemplate | None = None
    aggregations: int = 0
    verified: set = field(default_factory=set)
    events: list = field(default_factory=list)
    _pk_cache: dict = field(default_factory=dict, repr=False)

    def public_key(self, client_id: int) -> pqc.PublicKey | None:
        raw = self.registry.get(client_id)
        if raw is None:
            return None
        if client_id not in self._pk_cache:
            self._pk_cache[client_id] = pqc.PublicKey.from_bytes(raw, self.sig_params)
        return self._pk_cache[client_id]

    def _note(self, kind: str, detail: str) -> None:
        self.events.append((kind, detail))
        log.debug("edge %d %s: %s", self.id, kind, detail)


def _check_upload(state: EdgeState, msg: UploadMessage) -> str | None:
    """Return a rejection reason, or None when the upload verifies."""
    cid = msg.gradient.owner_id
    pk = state.public_key(cid)
    if pk is None:
        return f"unknown client {cid}"
    if msg.public_key != state.registry[cid]:
        return f"public key mismatch for client {cid}"
    if not np.all(np.isfinite(msg.gradient.values)):
        return "non-finite gradient"
    if not pqc.verify(pk, msg.gradient.to_bytes(), msg.signature, state.sig_params):
        return f"bad signature from client {cid}"
    return None


def _admit(state: EdgeState, entry: PoolEntry) -> None:
    key = entry.key
    state.seen.add(key)
    state.verified.add(key)
    state.pool[key] = entry
    state.unaggregated_count += 1
    state.pending_txs[key] = entry.transaction


def edge_receive_upload(state: EdgeState, msg: UploadMessage) -> EdgeState:
    key = msg.key
    if key in state.seen:
        state._note("duplicate", f"client {key[0]}")
        return state
    reason = _check_upload(state, msg)
    if reason is not None:
        state._note("reject", reason)
        return state
    entry = PoolEntry(msg, state.id)
    _admit(state, entry)
    state.outbox.append(entry)
    return state


def pool_delta(state: EdgeState) -> PoolDelta:
    """Entries this node admitted from its own clients since the last call."""
    delta = PoolDelta(state.id, list(state.outbox))
    state.outbox = []
    return delta


def merge_pool_delta(state: EdgeState, delta: PoolDelta) -> EdgeState:
    if delta.sender_id == state.id:
        return state
    for entry in delta.entries:
        if entry.key in state.seen:
            continue
        reason = _check_upload(state, entry.upload)
        if reason is not None:
            state._note("reject-peer", f"from edge {delta.sender_id}: {reason}")
            continue
        _admit(state, entry)
    return state


def edge_exchange(state: EdgeState, peer_messages: list[PoolDelta]) -> tuple[EdgeState, PoolDelta]:
    """Broadcast this node's new entries and merge (re-verified) peer entries."""
    out = pool_delta(state)
    for msg in peer_messages:
        merge_pool_delta(state, msg)
    return state, out


def edge_aggregate_if_due(state: EdgeState, phi: int, incentive_cfg: IncentiveConfig
                          ) -> tuple[EdgeState, Aggregation | None]:
    """Aggregate once strictly more than ``phi`` unaggregated gradients are pooled."""
    if state.unaggregated_count <= phi or not state.pool:
        return state, None
    keys = sorted(state.pool)
    for key in keys:
        if key not in state.verified:
            raise AssertionError(f"unverified gradient {key} reached aggregation")
    W = [state.pool[k].upload.gradient for k in keys]
    state.aggregations += 1
    w_g = simple_average(W)
    w_g.round_tag = state.aggregations
    report = identify_contributions(W, w_g, incentive_cfg)
    final = report.recomputed_global
    final.owner_id = 0
    final.round_tag = state.aggregations
    record = GlobalRecord(final, report.reward_list)
    state.pending_records.append(record)
    state.pool = {}
    state.unaggregated_count = 0
    return state, Aggregation(record, report, keys, w_g)


def edge_mine(state: EdgeState, tick: int, budget: int, max_txs: int
              ) -> tuple[Block | None, int]:
    """Spend up to ``budget`` hashes on a block carrying the pending records."""
    if not state.pending_txs and not state.pending_records:
        state.template = None
        return None, 0
    txs = list(state.pending_txs.values())[:max_txs]
    tx_first = state.pending_records[0] if state.pending_records else None
    state.template = BlockTemplate.on_tip(state.chain.tip, tick, tx_first, txs)
    block, used = mine(state.template, state.nonce_cursor, budget, state.chain.params)
    state.nonce_cursor += used
    return block, used


def edge_adopt_block(state: EdgeState, block: Block) -> tuple[bool, str]:
    ok, reason = state.chain.adopt_block(block)
    if not ok:
        state._note("block-rejected", f"height {block.index}: {reason}")
        return False, reason
    for tx in block.txs:
        state.pending_txs.pop(tx.key, None)
    if block.tx_first is not None:
        digest = block.tx_first.digest
        state.pending_records = [r for r in state.pending_records if r.digest != digest]
    state.template = None
    return True, reason


def make_edge(edge_id: int, registry: dict[int, bytes], sig_params: pqc.LatticeParams,
              mining: MiningParams) -> EdgeState:
    return EdgeState(id=edge_id, chain=Chain(mining), registry=dict(registry), sig_params=sig_params)
