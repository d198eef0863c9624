"""Clustering of embedding points and the assignment utilities built on it.

All algorithms return a :class:`ClusterAssignment` whose labels are compacted
to ``0..n_clusters-1`` in order of first appearance, so every cluster is
non-empty.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .numerics import jacobi_eigen_symmetric, make_rng

log = logging.getLogger(__name__)


class ClusteringWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        """Build an assignment, relabelling ids by first appearance."""
        labels = np.asarray(labels)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        remap = np.empty_like(order)
        remap[order] = np.arange(order.size)
        return cls(labels=remap[inv.reshape(-1)].astype(np.int64), n_clusters=int(order.size))

    def members(self, lam: int) -> np.ndarray:
        return np.flatnonzero(self.labels == lam)


def assignment_to_mask(c: ClusterAssignment) -> np.ndarray:
    """Mask with ``M[i, j] = 1`` iff items i and j share a cluster."""
    return (c.labels[:, None] == c.labels[None, :]).astype(np.float64)


def last_indices(c: ClusterAssignment) -> np.ndarray:
    """Largest position carrying each cluster label."""
    mu = np.full(c.n_clusters, -1, dtype=np.int64)
    for j, lam in enumerate(c.labels):
        mu[lam] = j
    return mu


def wcss(points: np.ndarray, labels: np.ndarray) -> float:
    """Within-cluster sum of squared distances to the cluster means."""
    points = np.asarray(points, dtype=float)
    total = 0.0
    for lam in np.unique(labels):
        x = points[labels == lam]
        total += float(np.sum((x - x.mean(axis=0)) ** 2))
    return total


def _check_k(n: int, k: int):
    if k < 1 or k > n:
        raise ValueError(f"cluster count k={k} must lie in 1..{n}")


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def ward_labels(points: np.ndarray, k: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Raw Ward agglomeration; ``weights`` gives initial cluster sizes."""
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    size = np.ones(n) if weights is None else np.asarray(weights, dtype=float).copy()
    # Ward merge cost between singletons: (n_a n_b / (n_a + n_b)) ||x_a - x_b||^2
    d = _sq_dists(x) * (size[:, None] * size[None, :]) / (size[:, None] + size[None, :])
    active = np.ones(n, dtype=bool)
    d[np.diag_indices(n)] = np.inf
    parent = np.arange(n)
    for _ in range(n - k):
        # argmin over the flattened upper triangle -> smallest (i, j) on ties
        flat = int(np.argmin(d))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        ni, nj = size[i], size[j]
        dij = d[i, j]
        nk = size
        # Lance-Williams update for Ward linkage
        new = ((ni + nk) * d[i] + (nj + nk) * d[j] - nk * dij) / (ni + nj + nk)
        new[~active] = np.inf
        d[i, :] = new
        d[:, i] = new
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        size[i] = ni + nj
        active[j] = False
        parent[parent == j] = i
    return parent


def ward(points, k: int) -> ClusterAssignment:
    x = np.asarray(points, dtype=float)
    _check_k(x.shape[0], k)
    return ClusterAssignment.from_labels(ward_labels(x, k))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, k: int, max_iters: int = 100, rng: np.random.Generator | None = None, history: list | None = None):
    """Lloyd's algorithm from k-means++ seeds.

    An empty cluster has its centroid moved to the point farthest from its
    current centroid. If ``history`` is a list, the WCSS after every
    assignment step is appended to it.
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    _check_k(n, k)
    rng = rng if rng is not None else make_rng(0)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iters):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        if history is not None:
            history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = d2[np.arange(n), labels]
        for c in range(k):
            sel = labels == c
            if sel.any():
                centers[c] = x[sel].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centers[c] = x[far]
                own[far] = -1.0
    return ClusterAssignment.from_labels(labels)


def spectral(points, k: int, gamma: float | None = None, rng: np.random.Generator | None = None) -> ClusterAssignment:
    """Normalized-Laplacian spectral clustering with an RBF affinity.

    ``gamma`` defaults to ``1 / dim``. The rows of the ``k`` bottom
    eigenvectors are normalized to unit length and clustered with k-means.
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    _check_k(n, k)
    if k == 1:
        return ClusterAssignment.from_labels(np.zeros(n, dtype=int))
    sq = _sq_dists(x)
    if np.all(sq == 0.0):
        warnings.warn("all points identical; spectral clustering collapsed to one cluster", ClusteringWarning)
        return ClusterAssignment.from_labels(np.zeros(n, dtype=int))
    gamma = 1.0 / x.shape[1] if gamma is None else gamma
    aff = np.exp(-gamma * sq)
    deg = aff.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - inv[:, None] * aff * inv[None, :]
    lap = 0.5 * (lap + lap.T)
    _, vecs = jacobi_eigen_symmetric(lap)
    emb = vecs[:, :k]
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    out = kmeans(emb, k, rng=rng if rng is not None else make_rng(0))
    if out.n_clusters < k:
        warnings.warn(f"spectral clustering produced {out.n_clusters} < {k} clusters", ClusteringWarning)
    return out


class _CF:
    """Clustering feature (N, linear sum, squared sum) of a subcluster."""

    __slots__ = ("n", "ls", "ss", "child")

    def __init__(self, n, ls, ss, child=None):
        self.n = n
        self.ls = ls
        self.ss = ss
        self.child = child

    @property
    def centroid(self):
        return self.ls / self.n

    def radius_with(self, x) -> float:
        n = self.n + 1
        ls = self.ls + x
        ss = self.ss + float(x @ x)
        return float(np.sqrt(max(ss / n - float(ls @ ls) / (n * n), 0.0)))

    def absorb(self, other: "_CF"):
        self.n += other.n
        self.ls = self.ls + other.ls
        self.ss += other.ss


class _Node:
    __slots__ = ("entries", "leaf")

    def __init__(self, leaf: bool):
        self.entries: list[_CF] = []
        self.leaf = leaf

    def summary(self) -> _CF:
        cf = _CF(0, np.zeros_like(self.entries[0].ls), 0.0, child=self)
        for e in self.entries:
            cf.absorb(e)
        return cf


def _split(node: _Node) -> tuple[_Node, _Node]:
    cents = np.array([e.centroid for e in node.entries])
    d = _sq_dists(cents)
    i, j = divmod(int(np.argmax(d)), d.shape[0])
    a, b = _Node(node.leaf), _Node(node.leaf)
    for idx, e in enumerate(node.entries):
        (a if d[idx, i] <= d[idx, j] else b).entries.append(e)
    return a, b


def _insert(node: _Node, cf: _CF, x: np.ndarray, threshold: float, branching: int):
    """Insert a point; returns a pair of nodes if ``node`` had to split."""
    cents = np.array([e.centroid for e in node.entries]) if node.entries else None
    if node.leaf:
        if cents is not None:
            c = int(np.argmin(np.sum((cents - x) ** 2, axis=1)))
            if node.entries[c].radius_with(x) <= threshold:
                node.entries[c].absorb(cf)
                return None
        node.entries.append(cf)
    else:
        c = int(np.argmin(np.sum((cents - x) ** 2, axis=1)))
        child = node.entries[c].child
        res = _insert(child, cf, x, threshold, branching)
        if res is None:
            node.entries[c].absorb(cf)
        else:
            a, b = res
            node.entries[c] = a.summary()
            node.entries.insert(c + 1, b.summary())
    if len(node.entries) > branching:
        return _split(node)
    return None


def birch_subclusters(points, threshold: float = 0.5, branching: int = 50):
    """Build a CF-tree and return (leaf subcluster centroids, sizes, point -> subcluster)."""
    if threshold <= 0:
        raise ValueError("BIRCH threshold must be positive")
    if branching < 2:
        raise ValueError("BIRCH branching factor must be >= 2")
    x = np.asarray(points, dtype=float)
    root = _Node(leaf=True)
    for p in x:
        res = _insert(root, _CF(1, p.copy(), float(p @ p)), p, threshold, branching)
        if res is not None:
            a, b = res
            root = _Node(leaf=False)
            root.entries = [a.summary(), b.summary()]
    leaves: list[_CF] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.leaf:
            leaves.extend(node.entries)
        else:
            stack.extend(e.child for e in reversed(node.entries))
    cents = np.array([e.centroid for e in leaves])
    sizes = np.array([e.n for e in leaves], dtype=float)
    # each point goes to its nearest leaf subcluster centroid
    d2 = np.sum((x[:, None, :] - cents[None, :, :]) ** 2, axis=2)
    return cents, sizes, np.argmin(d2, axis=1)


def birch(points, threshold: float = 0.5, branching: int = 50, k: int | None = None) -> ClusterAssignment:
    """BIRCH: CF-tree subclusters, globally merged to ``k`` by Ward on their centroids."""
    x = np.asarray(points, dtype=float)
    cents, sizes, sub = birch_subclusters(x, threshold, branching)
    m = cents.shape[0]
    if k is None:
        return ClusterAssignment.from_labels(sub)
    if k < 1:
        raise ValueError(f"cluster count k={k} must be >= 1")
    if k > m:
        warnings.warn(f"BIRCH found {m} subclusters, fewer than k={k}", ClusteringWarning)
        k = m
    glob = ward_labels(cents, k)
    return ClusterAssignment.from_labels(glob[sub])


def dbscan(points, eps: float = 0.5, min_pts: int = 5) -> ClusterAssignment:
    """DBSCAN with noise points promoted to singleton clusters."""
    if eps <= 0:
        raise ValueError("DBSCAN eps must be positive")
    if min_pts < 1:
        raise ValueError("DBSCAN min_pts must be >= 1")
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    nbrs = _sq_dists(x) <= eps * eps
    core = nbrs.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cur = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cur
        queue = [i]
        while queue:
            j = queue.pop()
            if not core[j]:
                continue
            for q in np.flatnonzero(nbrs[j]):
                if labels[q] == -1:
                    labels[q] = cur
                    queue.append(q)
        cur += 1
    for i in np.flatnonzero(labels == -1):
        labels[i] = cur
        cur += 1
    return ClusterAssignment.from_labels(labels)


Method = Literal["none", "ward", "kmeans", "spectral", "birch", "dbscan"]
METHODS: tuple[str, ...] = ("ward", "kmeans", "spectral", "birch", "dbscan")


class ClusterSpec(BaseModel):
    """A configured clusterer; calling it clusters a point set.

    ``k`` is capped at the number of points so short sequences still cluster.
    ``none`` gives every point its own cluster.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = "ward"
    k: int = 5
    seed: int = 0
    max_iters: int = 100
    gamma: float | None = None
    threshold: float = 0.5
    branching: int = 50
    eps: float = 0.5
    min_pts: int = 5

    def __call__(self, points) -> ClusterAssignment:
        x = np.asarray(points, dtype=float)
        n = x.shape[0]
        if n == 0:
            raise ValueError("cannot cluster an empty point set")
        k = min(self.k, n)
        if self.method == "none":
            return ClusterAssignment.from_labels(np.arange(n))
        if self.method == "ward":
            return ward(x, k)
        if self.method == "kmeans":
            return kmeans(x, k, self.max_iters, make_rng(self.seed))
        if self.method == "spectral":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ClusteringWarning)
                return spectral(x, k, self.gamma, make_rng(self.seed))
        if self.method == "birch":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ClusteringWarning)
                return birch(x, self.threshold, self.branching, k)
        if self.method == "dbscan":
            return dbscan(x, self.eps, self.min_pts)
        raise ValueError(f"unknown clustering method {self.method!r}")

    @property
    def label(self) -> str:
        if self.method in ("none", "dbscan"):
            return f"{self.method}"
        return f"{self.method}-{self.k}"
