import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bflmec import fl
from bflmec.fl import Dataset, GradientVector, Model, TrainConfig

from oracles import central_difference, softmax_xent

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def gv(*values, owner=0):
    return GradientVector(np.array(values, dtype=float), owner_id=owner)


def test_zero_step_is_identity():
    data = fl.make_synthetic(50, 8, 3, seed=1)
    model = Model(8, 3, np.random.default_rng(0).normal(size=27))
    out = fl.local_update(model, data, TrainConfig(eta=0.0, epochs=3, batch=7), np.random.default_rng(1))
    assert np.array_equal(out.values, model.params)


def test_single_datum_step_matches_finite_difference():
    rng = np.random.default_rng(2)
    for _ in range(5):
        d, k = 5, 4
        model = Model(d, k, rng.normal(size=(d + 1) * k))
        x, y = rng.normal(size=d), int(rng.integers(k))
        data = Dataset(x[None, :], np.array([y]), k)
        out = fl.local_update(model, data, TrainConfig(eta=0.1, epochs=1, batch=1), rng)

        def f(theta):
            W, b = model.split(theta)
            return softmax_xent(W, b, x, y)

        numeric = central_difference(f, model.params)
        assert np.allclose(out.values, model.params - 0.1 * numeric, rtol=0, atol=1e-7)


def test_step_count():
    data = fl.make_synthetic(100, 4, 3, seed=3)
    steps = []
    fl.local_update(Model(4, 3), data, TrainConfig(epochs=5, batch=10), np.random.default_rng(0),
                    on_step=lambda i, _: steps.append(i))
    assert steps == list(range(50))
    steps.clear()
    fl.local_update(Model(4, 3), data.subset(np.arange(95)), TrainConfig(epochs=2, batch=10),
                    np.random.default_rng(0), on_step=lambda i, _: steps.append(i))
    assert len(steps) == 20


def test_local_update_deterministic_per_seed():
    data = fl.make_synthetic(60, 6, 3, seed=4)
    a = fl.local_update(Model(6, 3), data, TrainConfig(), np.random.default_rng(9))
    b = fl.local_update(Model(6, 3), data, TrainConfig(), np.random.default_rng(9))
    assert a == b


def test_full_batch_loss_decreases():
    data = fl.make_synthetic(200, 16, 4, separation=1.0, seed=5)
    losses = []
    fl.local_update(Model(16, 4), data, TrainConfig(eta=0.01, epochs=10, batch=len(data)),
                    np.random.default_rng(0), on_step=lambda i, v: losses.append(v))
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_local_update_errors():
    with pytest.raises(ValueError):
        fl.local_update(Model(3, 2), Dataset.empty(3, 2), TrainConfig(), np.random.default_rng(0))
    data = Dataset(np.full((4, 3), 1e200), np.array([0, 1, 0, 1]), 2)
    with pytest.raises(fl.DivergenceError):
        fl.local_update(Model(3, 2), data, TrainConfig(eta=1e10, epochs=3, batch=2), np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(eta=-1.0)


# -------------------------------------------------------------- evaluation

def test_evaluate_perfect_and_zero_model():
    data = fl.make_synthetic(500, 8, 10, seed=6)
    # Zero model: all logits tie, argmax picks class 0.
    assert fl.evaluate(Model(8, 10), data) == pytest.approx(np.mean(data.labels == 0))
    assert fl.evaluate(Model(8, 10), data) == 0.1
    X = np.eye(3)
    perfect = Model(3, 3, np.concatenate([(10 * np.eye(3)).ravel(), np.zeros(3)]))
    assert fl.evaluate(perfect, Dataset(X, np.array([0, 1, 2]), 3)) == 1.0
    with pytest.raises(ValueError):
        fl.evaluate(perfect, Dataset.empty(3, 3))


@given(hnp.arrays(np.float64, 4 * 3 + 3, elements=finite))
def test_accuracy_in_unit_interval(params):
    data = fl.make_synthetic(30, 4, 3, seed=0)
    assert 0.0 <= fl.evaluate(Model(4, 3, params), data) <= 1.0


def test_average_accuracy():
    assert fl.average_accuracy([1.0]) == 1.0
    assert fl.average_accuracy([0.0, 1.0]) == 0.5
    assert fl.average_accuracy([0.2, 0.4, 0.9]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fl.average_accuracy([])


# ------------------------------------------------------------ aggregation

def test_simple_average_examples():
    v = gv(1.5, -2.0)
    assert np.array_equal(fl.simple_average([v]).values, v.values)
    assert np.array_equal(fl.simple_average([v, gv(-1.5, 2.0)]).values, [0.0, 0.0])
    assert np.array_equal(fl.simple_average([gv(1, 2), gv(3, 4)]).values, [2.0, 3.0])
    with pytest.raises(ValueError):
        fl.simple_average([gv(1, 2), gv(1, 2, 3)])
    with pytest.raises(ValueError):
        fl.simple_average([])


def test_weighted_average_examples():
    a, b = gv(0, 0), gv(4, 8)
    assert np.array_equal(fl.weighted_average([a, b], [0.25, 0.75]).values, [3.0, 6.0])
    assert np.array_equal(fl.weighted_average([gv(1, 2), gv(5, 5)], [1.0, 0.0]).values, [1.0, 2.0])
    with pytest.raises(ValueError):
        fl.weighted_average([a, b], [1.0])
    with pytest.raises(ValueError):
        fl.weighted_average([a, b], [1.5, -0.5])


@given(st.lists(hnp.arrays(np.float64, 5, elements=finite), min_size=1, max_size=8))
def test_uniform_weights_equal_simple_average_bitwise(rows):
    W = [GradientVector(r) for r in rows]
    p = [1.0 / len(W)] * len(W)
    assert fl.weighted_average(W, p).values.tobytes() == fl.simple_average(W).values.tobytes()


@given(st.lists(hnp.arrays(np.float64, 4, elements=finite), min_size=2, max_size=6), st.data())
def test_aggregation_linearity(rows, data):
    W = [GradientVector(r) for r in rows]
    raw_p = data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(W), max_size=len(W)))
    raw_q = data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(W), max_size=len(W)))
    total = sum(raw_p) + sum(raw_q)
    p = [x / total for x in raw_p]
    q = [x / total for x in raw_q]
    lhs = fl.weighted_average(W, p).values + fl.weighted_average(W, q).values
    rhs = fl.weighted_average(W, [x + y for x, y in zip(p, q)]).values
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(rows).max()))


def test_gradient_bytes_roundtrip():
    g = GradientVector(np.array([1.0, -0.5, np.pi]), owner_id=7, round_tag=3)
    assert GradientVector.from_bytes(g.to_bytes()) == g
    with pytest.raises(ValueError):
        GradientVector.from_bytes(g.to_bytes()[:-1])


# --------------------------------------------------------- data plumbing

def test_partition_examples():
    data = fl.make_synthetic(100, 4, 10, seed=7)
    whole = fl.partition(data, 1, "iid", np.random.default_rng(0))
    assert len(whole) == 1 and np.array_equal(np.sort(whole[0].labels), np.sort(data.labels))
    parts = fl.partition(data, 4, "iid", np.random.default_rng(0))
    assert [len(p) for p in parts] == [25, 25, 25, 25]
    skew = fl.partition(data, 5, "label-skew", np.random.default_rng(0), shards_per_client=2)
    assert all(len(np.unique(p.labels)) <= 2 for p in skew)
    with pytest.raises(ValueError):
        fl.partition(data, 101, "iid", np.random.default_rng(0))


@given(st.integers(1, 12), st.sampled_from(["iid", "label-skew"]), st.integers(0, 1000))
def test_partition_is_disjoint_cover(n, mode, seed):
    data = fl.make_synthetic(60, 3, 5, seed=seed)
    data = Dataset(np.arange(60, dtype=float)[:, None] * np.ones((1, 3)), data.labels, 5)
    parts = fl.partition(data, n, mode, np.random.default_rng(seed), shards_per_client=2)
    ids = np.concatenate([p.features[:, 0] for p in parts]).astype(int)
    assert sorted(ids.tolist()) == list(range(60))


def test_synthetic_is_seeded_and_balanced():
    a = fl.make_synthetic(200, 8, 10, seed=3)
    b = fl.make_synthetic(200, 8, 10, seed=3)
    assert np.array_equal(a.features, b.features)
    assert np.bincount(a.labels).tolist() == [20] * 10


def test_idx_roundtrip(tmp_path):
    images = (np.arange(2 * 3 * 4) % 256).astype(np.uint8).reshape(2, 3, 4)
    labels = np.array([3, 1], dtype=np.uint8)
    fl.write_idx(tmp_path / "img", images)
    fl.write_idx(tmp_path / "lab", labels)
    raw = (tmp_path / "img").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 3]) and int.from_bytes(raw[4:8], "big") == 2
    assert np.array_equal(fl.read_idx(tmp_path / "img"), images)
    data = fl.load_idx_dataset(tmp_path / "img", tmp_path / "lab", 10)
    assert data.features.shape == (2, 12) and data.labels.tolist() == [3, 1]
