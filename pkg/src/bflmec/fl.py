"""Local training, evaluation, data handling and the two aggregation rules."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    pass


@dataclass
class GradientVector:
    """Flat parameter vector uploaded by a client after local training."""

    values: np.ndarray
    owner_id: int = 0
    round_tag: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("GradientVector values must be one-dimensional")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def value_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    def to_bytes(self) -> bytes:
        # The signed message: owner, round tag, dimension, raw float64 values.
        return struct.pack("<III", self.owner_id, self.round_tag, self.dim) + self.value_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GradientVector":
        owner, tag, dim = struct.unpack_from("<III", data)
        if len(data) != 12 + 8 * dim:
            raise ValueError("gradient byte length does not match its header")
        values = np.frombuffer(data, dtype="<f8", offset=12).astype(np.float64)
        return cls(values=values, owner_id=owner, round_tag=tag)

    def __eq__(self, other):
        return (isinstance(other, GradientVector) and self.owner_id == other.owner_id
                and self.round_tag == other.round_tag and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    @classmethod
    def empty(cls, n_features: int, class_count: int) -> "Dataset":
        return cls(np.zeros((0, n_features)), np.zeros(0, dtype=np.int64), class_count)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.features, other.features]),
                       np.concatenate([self.labels, other.labels]), self.class_count)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    epochs: int = 5
    batch: int = 10

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")


@dataclass
class Model:
    """Multinomial logistic regression; params = weight matrix (row-major) then bias."""

    n_features: int
    n_classes: int
    params: np.ndarray = field(default=None)

    def __post_init__(self):
        size = (self.n_features + 1) * self.n_classes
        if self.params is None:
            self.params = np.zeros(size)
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {self.params.shape}")

    def split(self, params=None):
        p = self.params if params is None else params
        cut = self.n_features * self.n_classes
        return p[:cut].reshape(self.n_features, self.n_classes), p[cut:]

    def logits(self, X, params=None) -> np.ndarray:
        W, b = self.split(params)
        return X @ W + b

    def with_params(self, params) -> "Model":
        return Model(self.n_features, self.n_classes, params)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(model: Model, X: np.ndarray, y: np.ndarray, params=None) -> float:
    """Mean cross-entropy."""
    logp = _log_softmax(model.logits(X, params))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_grad(model: Model, X: np.ndarray, y: np.ndarray, params=None) -> np.ndarray:
    logp = _log_softmax(model.logits(X, params))
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    return np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])


def local_update(model: Model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                 owner_id: int = 0, round_tag: int = 0,
                 on_step: Callable[[int, float], None] | None = None) -> GradientVector:
    """Run E epochs of minibatch SGD and return the trained parameter vector.

    The data is shuffled once and split into ceil(|D|/B) batches that are
    visited in the same order every epoch.
    """
    if len(data) == 0:
        raise ValueError("local_update needs a nonempty dataset")
    order = rng.permutation(len(data))
    batches = [order[i:i + cfg.batch] for i in range(0, len(order), cfg.batch)]
    w = model.params.copy()
    step = 0
    for _ in range(cfg.epochs):
        for idx in batches:
            X, y = data.features[idx], data.labels[idx]
            if on_step is not None or step == 0:
                value = loss(model, X, y, w)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at step {step}")
                if on_step is not None:
                    on_step(step, value)
            w = w - cfg.eta * loss_grad(model, X, y, w)
            step += 1
    if not np.all(np.isfinite(w)):
        raise DivergenceError("parameters became non-finite")
    return GradientVector(w, owner_id=owner_id, round_tag=round_tag)


def evaluate(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("evaluate needs a nonempty dataset")
    pred = np.argmax(model.logits(data.features), axis=1)
    return float(np.mean(pred == data.labels))


def average_accuracy(accs: Sequence[float]) -> float:
    if len(accs) == 0:
        raise ValueError("average_accuracy of an empty list")
    total = 0.0
    for a in accs:
        total += a
    return total / len(accs)


# ------------------------------------------------------------- aggregation

def _check_dims(W: Sequence[GradientVector]) -> int:
    if not W:
        raise ValueError("cannot aggregate an empty gradient list")
    dim = W[0].dim
    if any(w.dim != dim for w in W):
        raise ValueError("gradient dimensions differ")
    return dim


def simple_average(W: Sequence[GradientVector]) -> GradientVector:
    _check_dims(W)
    return weighted_average(W, [1.0 / len(W)] * len(W))


def weighted_average(W: Sequence[GradientVector], p: Sequence[float]) -> GradientVector:
    """Sum p_i * w_i accumulated left to right in list order."""
    dim = _check_dims(W)
    if len(W) != len(p):
        raise ValueError("weights and gradients differ in length")
    if any(pi < 0 for pi in p):
        raise ValueError("negative aggregation weight")
    acc = np.zeros(dim)
    for w, pi in zip(W, p):
        acc = acc + pi * w.values
    return GradientVector(acc, owner_id=0, round_tag=max(w.round_tag for w in W))


# ------------------------------------------------------------------- data

def make_synthetic(n_samples: int, n_features: int = 64, n_classes: int = 10,
                   separation: float = 1.0, noise: float = 1.0, seed: int = 0) -> Dataset:
    """Balanced Gaussian blobs; class means ~ N(0, separation^2 I)."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(n_classes, n_features))
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    X = means[labels] + rng.normal(0.0, noise, size=(n_samples, n_features))
    return Dataset(X, labels, n_classes)


def partition(data: Dataset, n: int, mode: str = "iid", rng: np.random.Generator | None = None,
              shards_per_client: int = 2) -> list[Dataset]:
    """Split ``data`` into ``n`` disjoint client datasets.

    ``iid`` deals a random permutation into near-equal parts.  ``label-skew``
    sorts by label, cuts ``n * shards_per_client`` shards and deals each client
    ``shards_per_client`` random shards.
    """
    if n < 1 or n > len(data):
        raise ValueError(f"cannot partition {len(data)} samples among {n} clients")
    rng = rng if rng is not None else np.random.default_rng(0)
    if mode == "iid":
        parts = np.array_split(rng.permutation(len(data)), n)
    elif mode == "label-skew":
        n_shards = n * shards_per_client
        if n_shards > len(data):
            raise ValueError("more shards than samples")
        order = np.argsort(data.labels, kind="stable")
        shards = np.array_split(order, n_shards)
        dealt = rng.permutation(n_shards)
        parts = [np.concatenate([shards[s] for s in dealt[i::n]]) for i in range(n)]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [data.subset(np.sort(p)) for p in parts]


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an ndarray."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    dtype, ndim = raw[2], raw[3]
    if dtype not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{dtype:02x}")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(raw, dtype=_IDX_TYPES[dtype], count=count, offset=offset)
    return arr.reshape(dims)


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    key = ">" + arr.dtype.str[1:]
    codes = {v: k for k, v in _IDX_TYPES.items()}
    if key not in codes:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, codes[key], arr.ndim]) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + arr.astype(key).tobytes())


def load_idx_dataset(images: str | Path, labels: str | Path, n_classes: int = 10,
                     limit: int | None = None) -> Dataset:
    X = read_idx(images).astype(np.float64)
    y = read_idx(labels).astype(np.int64)
    X = X.reshape(len(X), -1)
    if X.max(initial=0) > 1:
        X = X / 255.0
    if limit is not None:
        X, y = X[:limit], y[:limit]
    return Dataset(X, y, n_classes)
