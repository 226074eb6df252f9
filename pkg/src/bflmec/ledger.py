"""Proof-of-work ledger kept by edge nodes.

Block hash = SHA-256 over the 88-byte header

    index u64 | prev_hash 32B | timestamp u64 | body_digest 32B | nonce u64

(little-endian integers), where body_digest = SHA-256(serialized body).  The
body carries an optional first transaction (a ``GlobalRecord``) followed by
ordinary gradient transactions, which hold only a digest and a signature of
the gradient, never the gradient itself.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .fl import GradientVector

TARGET1 = 2**256
ZERO_HASH = bytes(32)
DEFAULT_MAX_TXS = 64
HEADER_BYTES = 88


@dataclass(frozen=True)
class MiningParams:
    difficulty: int = 2**20
    target1: int = TARGET1

    def __post_init__(self):
        if self.difficulty < 1:
            raise ValueError("difficulty must be a positive integer")
        if self.target <= 0:
            raise ValueError("target must be positive")

    @property
    def target(self) -> int:
        return self.target1 // self.difficulty


@dataclass(frozen=True)
class Transaction:
    sender_id: int
    receiver_id: int
    gradient_digest: bytes
    gradient_signature: bytes

    @property
    def key(self) -> tuple[int, bytes]:
        return (self.sender_id, self.gradient_digest)

    def to_bytes(self) -> bytes:
        return (struct.pack("<II", self.sender_id, self.receiver_id) + self.gradient_digest
                + struct.pack("<I", len(self.gradient_signature)) + self.gradient_signature)

    @classmethod
    def read(cls, data: bytes, offset: int = 0) -> tuple["Transaction", int]:
        sender, receiver = struct.unpack_from("<II", data, offset)
        offset += 8
        digest = data[offset:offset + 32]
        offset += 32
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        sig = data[offset:offset + n]
        if len(digest) != 32 or len(sig) != n:
            raise ValueError("truncated transaction")
        return cls(sender, receiver, bytes(digest), bytes(sig)), offset + n

    def to_json(self) -> dict:
        return {"sender_id": self.sender_id, "receiver_id": self.receiver_id,
                "gradient_digest": self.gradient_digest.hex(),
                "gradient_signature": self.gradient_signature.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "Transaction":
        return cls(d["sender_id"], d["receiver_id"], bytes.fromhex(d["gradient_digest"]),
                   bytes.fromhex(d["gradient_signature"]))


@dataclass
class GlobalRecord:
    global_gradient: GradientVector
    reward_list: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        ids = [cid for cid, _ in self.reward_list]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate client in reward list")
        if any(r < 0 for _, r in self.reward_list):
            raise ValueError("negative reward")

    def to_bytes(self) -> bytes:
        out = [self.global_gradient.to_bytes(), struct.pack("<I", len(self.reward_list))]
        out += [struct.pack("<Id", cid, r) for cid, r in self.reward_list]
        return b"".join(out)

    @classmethod
    def read(cls, data: bytes, offset: int = 0) -> tuple["GlobalRecord", int]:
        _, _, dim = struct.unpack_from("<III", data, offset)
        end = offset + 12 + 8 * dim
        grad = GradientVector.from_bytes(data[offset:end])
        (count,) = struct.unpack_from("<I", data, end)
        end += 4
        rewards = []
        for _ in range(count):
            cid, r = struct.unpack_from("<Id", data, end)
            rewards.append((cid, r))
            end += 12
        return cls(grad, rewards), end

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def to_json(self) -> dict:
        return {"owner_id": self.global_gradient.owner_id,
                "round_tag": self.global_gradient.round_tag,
                "global_gradient": self.global_gradient.values.tolist(),
                "reward_list": [[cid, r] for cid, r in self.reward_list]}

    @classmethod
    def from_json(cls, d: dict) -> "GlobalRecord":
        grad = GradientVector(np.array(d["global_gradient"], dtype=np.float64),
                              owner_id=d["owner_id"], round_tag=d["round_tag"])
        return cls(grad, [(int(c), float(r)) for c, r in d["reward_list"]])


def encode_body(tx_first: GlobalRecord | None, txs: Iterable[Transaction]) -> bytes:
    txs = list(txs)
    parts = [b"\x01" + tx_first.to_bytes() if tx_first is not None else b"\x00",
             struct.pack("<I", len(txs))]
    parts += [tx.to_bytes() for tx in txs]
    return b"".join(parts)


def decode_body(data: bytes) -> tuple[GlobalRecord | None, list[Transaction]]:
    offset = 1
    record = None
    if data[0] == 1:
        record, offset = GlobalRecord.read(data, 1)
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    txs = []
    for _ in range(count):
        tx, offset = Transaction.read(data, offset)
        txs.append(tx)
    if offset != len(data):
        raise ValueError("trailing bytes in block body")
    return record, txs


def header_prefix(index: int, prev_hash: bytes, timestamp: int, body_digest: bytes) -> bytes:
    return struct.pack("<Q", index) + prev_hash + struct.pack("<Q", timestamp) + body_digest


@dataclass
class Block:
    index: int
    prev_hash: bytes
    nonce: int
    timestamp: int
    tx_first: GlobalRecord | None
    txs: list[Transaction]
    hash: bytes = b""

    def body_bytes(self) -> bytes:
        return encode_body(self.tx_first, self.txs)

    def header_bytes(self) -> bytes:
        body_digest = hashlib.sha256(self.body_bytes()).digest()
        return header_prefix(self.index, self.prev_hash, self.timestamp, body_digest) + struct.pack("<Q", self.nonce)

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.header_bytes()).digest()

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.body_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        if len(data) < HEADER_BYTES + 5:
            raise ValueError("truncated block")
        index, = struct.unpack_from("<Q", data, 0)
        prev_hash = data[8:40]
        timestamp, = struct.unpack_from("<Q", data, 40)
        nonce, = struct.unpack_from("<Q", data, 80)
        tx_first, txs = decode_body(data[HEADER_BYTES:])
        # The hash is taken over the header as received; a body that does not
        # match the header's body digest then shows up as a hash mismatch.
        return cls(index, bytes(prev_hash), nonce, timestamp, tx_first, txs,
                   hashlib.sha256(data[:HEADER_BYTES]).digest())

    def to_json(self) -> dict:
        return {"index": self.index, "prev_hash": self.prev_hash.hex(), "nonce": self.nonce,
                "timestamp": self.timestamp, "hash": self.hash.hex(),
                "tx_first": self.tx_first.to_json() if self.tx_first is not None else None,
                "txs": [tx.to_json() for tx in self.txs]}

    @classmethod
    def from_json(cls, d: dict) -> "Block":
        return cls(index=d["index"], prev_hash=bytes.fromhex(d["prev_hash"]), nonce=d["nonce"],
                   timestamp=d["timestamp"],
                   tx_first=GlobalRecord.from_json(d["tx_first"]) if d["tx_first"] is not None else None,
                   txs=[Transaction.from_json(t) for t in d["txs"]], hash=bytes.fromhex(d["hash"]))


def genesis_block() -> Block:
    block = Block(index=0, prev_hash=ZERO_HASH, nonce=0, timestamp=0, tx_first=None, txs=[])
    block.hash = block.compute_hash()
    return block


@dataclass
class BlockTemplate:
    """A candidate block on top of a known tip; only the nonce varies while mining."""

    index: int
    prev_hash: bytes
    timestamp: int
    tx_first: GlobalRecord | None
    txs: list[Transaction]

    def __post_init__(self):
        body_digest = hashlib.sha256(encode_body(self.tx_first, self.txs)).digest()
        self._prefix = hashlib.sha256(header_prefix(self.index, self.prev_hash, self.timestamp, body_digest))

    @classmethod
    def on_tip(cls, tip: Block, timestamp: int, tx_first: GlobalRecord | None,
               txs: list[Transaction]) -> "BlockTemplate":
        return cls(tip.index + 1, tip.hash, timestamp, tx_first, list(txs))

    def hash_with(self, nonce: int) -> bytes:
        h = self._prefix.copy()
        h.update(struct.pack("<Q", nonce))
        return h.digest()

    def seal(self, nonce: int, digest: bytes) -> Block:
        return Block(self.index, self.prev_hash, nonce, self.timestamp, self.tx_first,
                     list(self.txs), digest)


def meets_target(digest: bytes, params: MiningParams) -> bool:
    return int.from_bytes(digest, "big") < params.target


def mine_step(candidate: BlockTemplate, nonce: int, params: MiningParams) -> Block | None:
    """Try a single nonce; return the sealed block if its hash is below target."""
    digest = candidate.hash_with(nonce)
    if int.from_bytes(digest, "big") < params.target:
        return candidate.seal(nonce, digest)
    return None


def mine(candidate: BlockTemplate, start_nonce: int, budget: int,
         params: MiningParams) -> tuple[Block | None, int]:
    """Scan up to ``budget`` nonces; return (block or None, attempts used)."""
    target = params.target
    h0 = candidate._prefix
    for i in range(budget):
        nonce = (start_nonce + i) & 0xFFFFFFFFFFFFFFFF
        h = h0.copy()
        h.update(struct.pack("<Q", nonce))
        digest = h.digest()
        if int.from_bytes(digest, "big") < target:
            return candidate.seal(nonce, digest), i + 1
    return None, budget


def validate_block(block: Block, prev: Block, params: MiningParams) -> tuple[bool, str]:
    """Return (True, "ok") or (False, reason)."""
    try:
        digest = block.compute_hash()
    except (struct.error, ValueError, TypeError, AttributeError):
        return False, "malformed"
    if digest != block.hash:
        return False, "hash-mismatch"
    if not meets_target(block.hash, params):
        return False, "target"
    if block.prev_hash != prev.hash:
        return False, "bad-prev"
    if block.index != prev.index + 1:
        return False, "bad-index"
    if block.timestamp < prev.timestamp:
        return False, "bad-timestamp"
    return True, "ok"


class Chain:
    """Single-writer block list; first valid block at each height wins."""

    def __init__(self, params: MiningParams, blocks: list[Block] | None = None):
        self.params = params
        self.blocks = blocks if blocks is not None else [genesis_block()]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.index

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    def adopt_block(self, block: Block) -> tuple[bool, str]:
        ok, reason = validate_block(block, self.tip, self.params)
        if ok:
            self.blocks.append(block)
        return ok, reason

    def validate(self) -> tuple[bool, str]:
        if self.blocks[0].to_json() != genesis_block().to_json():
            return False, "bad-genesis"
        for prev, block in zip(self.blocks, self.blocks[1:]):
            ok, reason = validate_block(block, prev, self.params)
            if not ok:
                return False, f"block {block.index}: {reason}"
        return True, "ok"

    def scan_for_global(self, anchor: int) -> tuple[int, GlobalRecord] | None:
        return scan_for_global(self.blocks, anchor)

    def dump_lines(self) -> Iterable[str]:
        for block in self.blocks:
            yield json.dumps(block.to_json(), separators=(",", ":"))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.dump_lines():
                fh.write(line + "\n")

    @classmethod
    def load(cls, path, params: MiningParams) -> "Chain":
        with open(path) as fh:
            blocks = [Block.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(params, blocks)


def scan_for_global(blocks, anchor: int) -> tuple[int, GlobalRecord] | None:
    """Latest block strictly after ``anchor`` whose first transaction is a GlobalRecord."""
    height = blocks[-1].index
    if anchor < 0 or anchor > height:
        raise IndexError(f"anchor {anchor} outside chain of height {height}")
    found = None
    for block in blocks[anchor + 1:]:
        if block.tx_first is not None:
            found = (block.index, block.tx_first)
    return found
