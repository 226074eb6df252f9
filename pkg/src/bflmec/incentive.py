"""Contribution identification: cluster the pool plus the provisional global
model, reward the clients that share its cluster, optionally drop the rest
and re-aggregate with contribution weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .fl import GradientVector, simple_average, weighted_average

HIGH = "high"
LOW = "low"
NOISE = -1


@dataclass(frozen=True)
class DBSCAN:
    """Density clustering over Euclidean distance.

    With ``eps=None`` the radius is relative: ``eps_scale`` times the median
    distance from a reference point (the provisional global model during
    contribution identification) to every other point, or times the median
    pairwise distance when no reference is given.  A point's neighbourhood
    includes the point itself.
    """

    eps: float | None = None
    min_pts: int = 3
    eps_scale: float = 1.5

    def __post_init__(self):
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if not self.eps_scale > 0:
            raise ValueError("eps_scale must be positive")

    def resolve_eps(self, dist: np.ndarray, reference: int | None = None) -> float:
        if self.eps is not None:
            return self.eps
        n = len(dist)
        if n < 2:
            return 1.0
        if reference is None:
            med = float(np.median(dist[np.triu_indices(n, 1)]))
        else:
            med = float(np.median(np.delete(dist[reference], reference)))
        return max(self.eps_scale * med, 1e-12)

    def fit(self, X: np.ndarray, reference: int | None = None) -> np.ndarray:
        return dbscan_labels(X, self.resolve_eps(pairwise_distances(X), reference), self.min_pts)


class Clusterer(Protocol):
    def fit(self, X: np.ndarray, reference: int | None = None) -> np.ndarray:
        """Return one integer label per row; ``-1`` marks noise."""


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def dbscan_labels(X: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (0..k-1) with -1 for noise.

    Cores are grown breadth-first.  A border point joins the cluster of its
    nearest core point (ties by lexicographic point value), so labels do not
    depend on row order beyond renumbering.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    dist = pairwise_distances(X)
    adj = dist <= eps
    core = adj.sum(axis=1) >= min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = k
        frontier = [i]
        while frontier:
            j = frontier.pop()
            for nb in np.flatnonzero(adj[j] & core):
                if labels[nb] == NOISE:
                    labels[nb] = k
                    frontier.append(nb)
        k += 1
    for i in np.flatnonzero(~core):
        cand = np.flatnonzero(adj[i] & core)
        if len(cand):
            best = min(cand, key=lambda c: (dist[i, c], tuple(X[c])))
            labels[i] = labels[best]
    return labels


def cluster(points: Sequence[GradientVector], cfg: "IncentiveConfig | DBSCAN") -> tuple[list[list[int]], list[int]]:
    """Group point indices into clusters plus a noise list."""
    clusterer = cfg.clustering if isinstance(cfg, IncentiveConfig) else cfg
    X = np.stack([p.values for p in points])
    labels = clusterer.fit(X)
    groups = [list(map(int, np.flatnonzero(labels == c))) for c in sorted(set(labels.tolist()) - {NOISE})]
    noise = list(map(int, np.flatnonzero(labels == NOISE)))
    return groups, noise


def cosine_theta(a: GradientVector, b: GradientVector, mode: str = "similarity") -> float:
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine weight undefined for a zero vector")
    cos = float(np.dot(a.values, b.values)) / (na * nb)
    cos = min(1.0, max(-1.0, cos))
    if mode == "similarity":
        return max(0.0, cos)
    if mode == "literal-distance":
        return 1.0 - cos
    raise ValueError(f"unknown weight mode {mode!r}")


@dataclass(frozen=True)
class IncentiveConfig:
    clustering: Clusterer = field(default_factory=DBSCAN)
    strategy: str = "discard-low"
    base: float = 100.0
    weight_mode: str = "similarity"

    def __post_init__(self):
        if self.strategy not in ("keep-all", "discard-low"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.weight_mode not in ("similarity", "literal-distance"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if not self.base > 0:
            raise ValueError("base must be positive")


@dataclass
class ContributionReport:
    labels: dict[int, str]
    thetas: dict[int, float]
    reward_list: list[tuple[int, float]]
    filtered_pool: list[GradientVector]
    recomputed_global: GradientVector
    entry_labels: list[str]
    entry_thetas: list[float]
    degenerate: bool = False
    eps: float | None = None

    @property
    def high(self) -> set[int]:
        return {c for c, lab in self.labels.items() if lab == HIGH}


def _normalize(thetas: Sequence[float]) -> list[float]:
    total = 0.0
    for t in thetas:
        total += t
    if total <= 0.0:
        # Every weight clamped to zero: fall back to equal shares.
        return [1.0 / len(thetas)] * len(thetas)
    return [t / total for t in thetas]


def _theta_or_zero(a: GradientVector, b: GradientVector, mode: str) -> float:
    try:
        return cosine_theta(a, b, mode)
    except ValueError:
        return 0.0


def identify_contributions(pool: Sequence[GradientVector], w_g: GradientVector,
                           cfg: IncentiveConfig) -> ContributionReport:
    """Label each pooled gradient high/low by whether it shares w_g's cluster.

    Rewards go to high clients in proportion to their cosine weight and sum
    to ``cfg.base``.  Under ``discard-low`` the global model is re-aggregated
    from the high entries with the same weights; under ``keep-all`` every entry
    is weighted.  When w_g itself is noise nobody is rewarded and the global
    model stays the simple average of the pool.
    """
    if not pool:
        raise ValueError("identify_contributions needs a nonempty pool")
    points = list(pool) + [w_g]
    X = np.stack([p.values for p in points])
    clusterer = cfg.clustering
    ref = len(points) - 1
    if isinstance(clusterer, DBSCAN):
        eps = clusterer.resolve_eps(pairwise_distances(X), reference=ref)
        labels = dbscan_labels(X, eps, clusterer.min_pts)
    else:
        eps = None
        labels = clusterer.fit(X, reference=ref)
    g_label = labels[-1]
    degenerate = g_label == NOISE
    entry_labels = [HIGH if (not degenerate and lab == g_label) else LOW for lab in labels[:-1]]
    entry_thetas = [_theta_or_zero(w, w_g, cfg.weight_mode) for w in pool]

    # A client is high if any of its entries is; high clients are weighted
    # by their high entries only.
    client_labels: dict[int, str] = {}
    for w, lab in zip(pool, entry_labels):
        if lab == HIGH or w.owner_id not in client_labels:
            client_labels[w.owner_id] = lab
    client_thetas: dict[int, float] = {c: 0.0 for c in client_labels}
    for w, lab, th in zip(pool, entry_labels, entry_thetas):
        if client_labels[w.owner_id] == lab:
            client_thetas[w.owner_id] += th

    high_ids = sorted(c for c, lab in client_labels.items() if lab == HIGH)
    reward_list = []
    if high_ids:
        shares = _normalize([client_thetas[c] for c in high_ids])
        reward_list = [(c, s * cfg.base) for c, s in zip(high_ids, shares)]

    if degenerate:
        filtered = [] if cfg.strategy == "discard-low" else list(pool)
        recomputed = simple_average(pool)
    elif cfg.strategy == "discard-low":
        idx = [i for i, lab in enumerate(entry_labels) if lab == HIGH]
        filtered = [pool[i] for i in idx]
        recomputed = weighted_average(filtered, _normalize([entry_thetas[i] for i in idx]))
    else:
        filtered = list(pool)
        recomputed = weighted_average(filtered, _normalize(entry_thetas))
    recomputed.round_tag = w_g.round_tag
    return ContributionReport(labels=client_labels, thetas=client_thetas, reward_list=reward_list,
                              filtered_pool=filtered, recomputed_global=recomputed,
                              entry_labels=entry_labels, entry_thetas=entry_thetas,
                              degenerate=bool(degenerate), eps=eps)
