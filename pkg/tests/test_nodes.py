import numpy as np
import pytest

from bflmec import fl, pqc
from bflmec.fl import Dataset, GradientVector, Model, TrainConfig
from bflmec.incentive import IncentiveConfig
from bflmec.ledger import GlobalRecord, MiningParams
from bflmec.nodes import (BlockBroadcast, ClientState, PoolDelta, UploadMessage, client_tick,
                          edge_adopt_block, edge_aggregate_if_due, edge_exchange, edge_mine,
                          edge_receive_upload, make_edge, merge_pool_delta, pool_delta)

P = pqc.TOY
EASY = MiningParams(difficulty=4)
CFG = TrainConfig(eta=0.05, epochs=1, batch=8)
DATA = fl.make_synthetic(400, 6, 3, seed=0)


@pytest.fixture(scope="module")
def keys():
    rng = np.random.default_rng(1)
    return {cid: pqc.keypair_gen(P, rng) for cid in range(1, 6)}


@pytest.fixture
def registry(keys):
    return {cid: kp.pk.to_bytes() for cid, kp in keys.items()}


def client(keys, cid=1):
    return ClientState(cid, keys[cid], Model(6, 3), Dataset.empty(6, 3))


def signed(keys, cid, values, round_tag=0):
    g = GradientVector(np.asarray(values, dtype=float), owner_id=cid, round_tag=round_tag)
    sig = pqc.sign(keys[cid].sk, g.to_bytes(), P, np.random.default_rng(cid))
    return UploadMessage(g, sig.to_bytes(), keys[cid].pk.to_bytes())


# ------------------------------------------------------------------ client

def test_training_needs_strictly_more_than_n(keys):
    st = client(keys)
    rng = np.random.default_rng(0)
    st, msg = client_tick(st, DATA.subset(np.arange(10)), None, 10, CFG, P, rng)
    assert not st.trained and msg is None and len(st.buffer) == 10
    st, msg = client_tick(st, DATA.subset([10]), None, 10, CFG, P, rng)
    assert st.trained and msg is not None and len(st.buffer) == 0


def test_disconnected_cycles_upload_mean(keys):
    st = client(keys)
    st.connected = False
    rng = np.random.default_rng(2)
    for t in range(3):
        st, msg = client_tick(st, DATA.subset(np.arange(20 * t, 20 * t + 20)), None, 10, CFG, P, rng, tick=t)
        assert msg is None
    pending = list(st.pending)
    assert len(pending) == 3
    st.connected = True
    st, msg = client_tick(st, None, None, 10, CFG, P, rng, tick=3)
    assert np.array_equal(msg.gradient.values, fl.simple_average(pending).values)
    assert st.pending == [] and st.uploaded_ticks == [0, 1, 2]
    assert pqc.verify(keys[1].pk, msg.gradient.to_bytes(), msg.signature, P)


def test_client_reads_newest_global_and_anchor_moves(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    params = np.random.default_rng(3).normal(size=Model(6, 3).params.size)
    rec = GlobalRecord(GradientVector(params), [(1, 100.0)])
    edge.pending_records.append(rec)
    block, _ = edge_mine(edge, 1, 10**6, 8)
    assert edge_adopt_block(edge, block)[0]
    st = client(keys)
    st, _ = client_tick(st, DATA.subset(np.arange(20)), edge.chain, 10, TrainConfig(eta=0.0), P,
                        np.random.default_rng(0))
    assert st.anchor == 1 and st.records_seen == 1
    assert np.array_equal(st.model.params, params)
    anchors = [st.anchor]
    for t in range(3):
        st, _ = client_tick(st, DATA.subset(np.arange(20)), edge.chain, 10, CFG, P, np.random.default_rng(t))
        anchors.append(st.anchor)
    assert anchors == sorted(anchors)


# -------------------------------------------------------------------- edge

def test_verified_upload_admitted_and_tampered_dropped(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    good = signed(keys, 1, [1.0, 2.0])
    edge_receive_upload(edge, good)
    assert list(edge.pool) == [good.key]
    bad = signed(keys, 2, [1.0, 2.0])
    bad.gradient = GradientVector(np.array([1.0, 2.5]), owner_id=2)
    edge_receive_upload(edge, bad)
    forged = UploadMessage(good.gradient, good.signature, keys[2].pk.to_bytes())
    stranger = UploadMessage(GradientVector(np.ones(2), owner_id=99), b"", b"")
    edge_receive_upload(edge, forged)
    edge_receive_upload(edge, stranger)
    assert len(edge.pool) == 1
    assert [k for k, _ in edge.events] == ["reject", "duplicate", "reject"]


def test_duplicate_upload_ignored(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    msg = signed(keys, 1, [0.5])
    edge_receive_upload(edge, msg)
    edge_receive_upload(edge, msg)
    assert len(edge.pool) == 1 and edge.unaggregated_count == 1


def test_exchange_two_nodes_and_idempotence(keys, registry):
    a, b = make_edge(0, registry, P, EASY), make_edge(1, registry, P, EASY)
    edge_receive_upload(a, signed(keys, 1, [1.0]))
    edge_receive_upload(b, signed(keys, 2, [2.0]))
    _, da = edge_exchange(a, [])
    _, db = edge_exchange(b, [da])
    merge_pool_delta(a, db)
    assert set(a.pool) == set(b.pool) and len(a.pool) == 2
    merge_pool_delta(a, db)
    merge_pool_delta(b, da)
    assert len(a.pool) == len(b.pool) == 2 and a.unaggregated_count == 2
    assert pool_delta(a).entries == []


def test_exchange_three_nodes(keys, registry):
    edges = [make_edge(i, registry, P, EASY) for i in range(3)]
    for i, e in enumerate(edges):
        edge_receive_upload(e, signed(keys, i + 1, [float(i)]))
    deltas = [pool_delta(e) for e in edges]
    for e in edges:
        for d in deltas:
            merge_pool_delta(e, d)
    assert all(set(e.pool) == set(edges[0].pool) for e in edges) and len(edges[0].pool) == 3


def test_peer_entries_are_reverified(keys, registry):
    a, b = make_edge(0, registry, P, EASY), make_edge(1, registry, P, EASY)
    edge_receive_upload(a, signed(keys, 1, [1.0]))
    delta = pool_delta(a)
    delta.entries[0].upload.gradient = GradientVector(np.array([9.0]), owner_id=1)
    merge_pool_delta(b, delta)
    assert b.pool == {} and b.events[0][0] == "reject-peer"


def test_aggregation_waits_for_strictly_more_than_phi(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    cfg = IncentiveConfig()
    for cid in (1, 2):
        edge_receive_upload(edge, signed(keys, cid, [1.0, float(cid)]))
    assert edge_aggregate_if_due(edge, 2, cfg)[1] is None
    edge_receive_upload(edge, signed(keys, 3, [1.0, 3.0]))
    _, agg = edge_aggregate_if_due(edge, 2, cfg)
    assert agg is not None and len(agg.keys) == 3
    assert edge.pool == {} and edge.unaggregated_count == 0 and edge.pending_records == [agg.record]


def test_phi_one_identical_uploads_split_reward(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    for cid in (1, 2):
        edge_receive_upload(edge, signed(keys, cid, [0.3, -0.7]))
    _, agg = edge_aggregate_if_due(edge, 1, IncentiveConfig())
    assert agg.record.reward_list == [(1, 50.0), (2, 50.0)]


def test_mine_and_adopt_clear_pending(keys, registry):
    edge = make_edge(0, registry, P, EASY)
    assert edge_mine(edge, 1, 100, 8) == (None, 0)
    for cid in (1, 2, 3):
        edge_receive_upload(edge, signed(keys, cid, [float(cid), 1.0]))
    _, agg = edge_aggregate_if_due(edge, 2, IncentiveConfig())
    block, used = edge_mine(edge, 1, 10**6, 8)
    assert block.tx_first.digest == agg.record.digest and len(block.txs) == 3
    assert edge_adopt_block(edge, block) == (True, "ok")
    assert edge.pending_txs == {} and edge.pending_records == []
    assert edge_adopt_block(edge, block)[0] is False


# -------------------------------------------------------------------- wire

def test_wire_roundtrips(keys, registry):
    msg = signed(keys, 1, [1.0, -2.0, 3.5], round_tag=4)
    back = UploadMessage.from_bytes(msg.to_bytes())
    assert back.gradient == msg.gradient and back.signature == msg.signature and back.key == msg.key
    with pytest.raises(ValueError):
        UploadMessage.from_bytes(msg.to_bytes() + b"x")
    edge = make_edge(3, registry, P, EASY)
    edge_receive_upload(edge, msg)
    delta = pool_delta(edge)
    again = PoolDelta.from_bytes(delta.to_bytes())
    assert again.sender_id == 3 and [e.key for e in again.entries] == [msg.key]
    assert again.entries[0].receiver_id == 3
    block, _ = edge_mine(edge, 2, 10**6, 8)
    bb = BlockBroadcast.from_bytes(BlockBroadcast(3, block).to_bytes())
    assert bb.sender_id == 3 and bb.block.hash == block.hash
    with pytest.raises(ValueError):
        BlockBroadcast.from_bytes(b"POOL" + bytes(8))
