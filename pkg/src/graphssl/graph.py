"""Graph container, normalization, traversal and partitioning.

Adjacency is kept as a symmetric boolean CSR structure without self-loops;
self-loops only appear in :func:`normalize_adjacency`.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from graphssl.rng import SeedStream

UNREACHABLE = -1
BEYOND_CUTOFF = -2


class GraphFormatError(ValueError):
    """Raised when a Graph-JSON file is malformed."""


class SplitError(ValueError):
    """Raised when train/val/test masks violate their invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with dense node features and (partial) labels.

    ``labels`` holds ``-1`` for unlabeled nodes.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.indptr) - 1
        object.__setattr__(self, "indptr", _frozen(np.asarray(self.indptr, dtype=np.int64)))
        object.__setattr__(self, "indices", _frozen(np.asarray(self.indices, dtype=np.int64)))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise GraphFormatError(f"features: expected {n} rows, got shape {feats.shape}")
        object.__setattr__(self, "features", _frozen(feats))
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise GraphFormatError(f"labels: expected length {n}, got {labels.shape}")
        if np.any(labels >= self.num_classes) or np.any(labels < -1):
            raise GraphFormatError("labels: class index out of range 0..num_classes-1")
        object.__setattr__(self, "labels", _frozen(labels))
        data = np.ones(len(self.indices), dtype=bool)
        csr = sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_edges(cls, num_nodes: int, edges, features, labels, num_classes: int) -> "Graph":
        """Build a graph from an undirected edge list.

        Duplicate edges and self-loops are dropped; one-directional pairs are
        symmetrized.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise GraphFormatError("edges: node index out of range")
        e = e[e[:, 0] != e[:, 1]]
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        key = np.unique(rows * num_nodes + cols)
        rows, cols = key // num_nodes, key % num_nodes
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(indptr, cols, features, labels, num_classes)

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def adjacency(self) -> sp.csr_matrix:
        return self._csr

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        k = np.searchsorted(nb, v)
        return bool(k < len(nb) and nb[k] == v)

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with ``u < v``."""
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.indptr, self.indices, features, self.labels, self.num_classes)

    def without_edges(self, removed) -> "Graph":
        """Return a new graph with the given undirected edges removed."""
        removed = np.asarray(removed, dtype=np.int64).reshape(-1, 2)
        n = self.num_nodes
        drop = set((removed[:, 0] * n + removed[:, 1]).tolist())
        drop |= set((removed[:, 1] * n + removed[:, 0]).tolist())
        e = self.edge_list()
        keep = np.array([u * n + v not in drop for u, v in e], dtype=bool) if len(e) else np.zeros(0, bool)
        return Graph.from_edges(n, e[keep], self.features, self.labels, self.num_classes)

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        e = inv[self.edge_list()]
        return Graph.from_edges(self.num_nodes, e, self.features[perm], self.labels[perm],
                                self.num_classes)


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))

    def validate(self, g: Graph) -> None:
        sets = {k: set(getattr(self, k).tolist()) for k in ("train", "val", "test")}
        for k, s in sets.items():
            if len(s) != len(getattr(self, k)):
                raise SplitError(f"{k}: duplicate node indices")
            if s and (min(s) < 0 or max(s) >= g.num_nodes):
                raise SplitError(f"{k}: node index out of range")
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            if sets[a] & sets[b]:
                raise SplitError(f"{a} and {b} masks overlap")
        if np.any(g.labels[self.train] < 0):
            raise SplitError("train: contains unlabeled nodes")

    def unlabeled(self, num_nodes: int) -> np.ndarray:
        """Every node outside the training set."""
        mask = np.ones(num_nodes, dtype=bool)
        mask[self.train] = False
        return np.flatnonzero(mask)


# --------------------------------------------------------------------------
# I/O

def _field(obj: dict, name: str):
    if name not in obj:
        raise GraphFormatError(f"missing field '{name}'")
    return obj[name]


def load_dataset(path) -> tuple[Graph, SplitMasks]:
    """Read a Graph-JSON file."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise GraphFormatError("top-level value must be an object")
    n = _field(obj, "num_nodes")
    if not isinstance(n, int) or n < 1:
        raise GraphFormatError("num_nodes: must be a positive integer")
    try:
        edges = np.asarray(_field(obj, "edges"), dtype=np.int64).reshape(-1, 2)
    except (ValueError, TypeError) as exc:
        raise GraphFormatError(f"edges: expected [u, v] integer pairs ({exc})") from exc
    try:
        feats = np.asarray(_field(obj, "features"), dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise GraphFormatError(f"features: expected N rows of equal length ({exc})") from exc
    if feats.ndim != 2:
        raise GraphFormatError("features: expected N rows of equal length")
    labels = _field(obj, "labels")
    k = _field(obj, "num_classes")
    g = Graph.from_edges(n, edges, feats, labels, k)
    masks = SplitMasks(_field(obj, "train"), _field(obj, "val"), _field(obj, "test"))
    masks.validate(g)
    return g, masks


def dataset_to_json(g: Graph, masks: SplitMasks) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "edges": g.edge_list().tolist(),
        "features": g.features.tolist(),
        "labels": g.labels.tolist(),
        "num_classes": int(g.num_classes),
        "train": masks.train.tolist(),
        "val": masks.val.tolist(),
        "test": masks.test.tolist(),
    }


def save_dataset(path, g: Graph, masks: SplitMasks) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(g, masks)), encoding="utf-8")


def load_partition(path, num_nodes: int | None = None) -> np.ndarray:
    """Read a partition-import file (JSON array of cluster ids)."""
    ids = np.asarray(json.loads(Path(path).read_text(encoding="utf-8")), dtype=np.int64)
    if ids.ndim != 1:
        raise GraphFormatError("partition: expected a flat array of cluster ids")
    if num_nodes is not None and len(ids) != num_nodes:
        raise GraphFormatError(f"partition: expected {num_nodes} entries, got {len(ids)}")
    if ids.size and ids.min() < 0:
        raise GraphFormatError("partition: negative cluster id")
    return ids


# --------------------------------------------------------------------------
# synthetic data

def generate_sbm(blocks: Sequence[int], p_in: float, p_out: float, feature_dim: int, seed: int,
                 *, noise: float = 1.0, train_per_class: int = 5, val_per_class: int = 5
                 ) -> tuple[Graph, SplitMasks]:
    """Stochastic block model with block-id labels and noisy one-hot features.

    Features are the one-hot block id (padded with zeros up to
    ``feature_dim``) plus Gaussian noise of standard deviation ``noise``.
    Each class contributes ``train_per_class`` training and ``val_per_class``
    validation nodes; the remaining nodes form the test set.
    """
    if len(blocks) == 0:
        raise ValueError("generate_sbm: empty block list")
    if any(b < 1 for b in blocks):
        raise ValueError("generate_sbm: block sizes must be >= 1")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("generate_sbm: probabilities must lie in [0, 1]")
    k = len(blocks)
    if feature_dim < k:
        raise ValueError(f"generate_sbm: feature_dim {feature_dim} < number of blocks {k}")
    streams = SeedStream(seed)
    labels = np.repeat(np.arange(k), blocks)
    n = len(labels)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    draw = streams.rng("sbm-edges").random(len(iu))
    hit = draw < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    feats = np.zeros((n, feature_dim))
    feats[np.arange(n), labels] = 1.0
    feats += noise * streams.rng("sbm-features").standard_normal((n, feature_dim))
    g = Graph.from_edges(n, edges, feats, labels, k)

    split_rng = streams.rng("sbm-split")
    train, val, test = [], [], []
    for c in range(k):
        members = split_rng.permutation(np.flatnonzero(labels == c))
        train.extend(members[:train_per_class])
        val.extend(members[train_per_class:train_per_class + val_per_class])
        test.extend(members[train_per_class + val_per_class:])
    masks = SplitMasks(np.sort(train), np.sort(val), np.sort(test))
    masks.validate(g)
    return g, masks


# --------------------------------------------------------------------------
# algorithms

def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric GCN propagation matrix D^-1/2 (A + I) D^-1/2."""
    n = g.num_nodes
    a_hat = (g.adjacency.astype(np.float64) + sp.identity(n, format="csr")).tocsr()
    a_hat.sort_indices()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    rows = np.repeat(np.arange(n), np.diff(a_hat.indptr))
    # d_i * d_j commutes exactly, so (i, j) and (j, i) come out bitwise equal
    a_hat.data = a_hat.data / np.sqrt(deg[rows] * deg[a_hat.indices])
    return a_hat


def bfs_distances(g: Graph, sources: Iterable[int], cutoff: int | None = None) -> np.ndarray:
    """Hop distances from each source, one row per source.

    Unreachable nodes hold ``UNREACHABLE``; with ``cutoff`` set, nodes further
    than ``cutoff`` hops hold ``BEYOND_CUTOFF`` and are never expanded.
    """
    sources = np.asarray(list(sources), dtype=np.int64)
    n = g.num_nodes
    out = np.full((len(sources), n), UNREACHABLE, dtype=np.int64)
    indptr, indices = g.indptr, g.indices
    comp = None
    if cutoff is not None:
        from scipy.sparse.csgraph import connected_components

        comp = connected_components(g.adjacency, directed=False)[1]
    for r, s in enumerate(sources):
        dist = out[r]
        dist[s] = 0
        frontier = np.array([s])
        level = 0
        while frontier.size:
            if cutoff is not None and level >= cutoff:
                break
            level += 1
            starts, ends = indptr[frontier], indptr[frontier + 1]
            lens = ends - starts
            if lens.sum() == 0:
                break
            offs = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
            nbrs = np.unique(indices[offs])
            nbrs = nbrs[dist[nbrs] == UNREACHABLE]
            dist[nbrs] = level
            frontier = nbrs
        if cutoff is not None and frontier.size:
            # anything still unvisited may lie in the same component; we did not look
            dist[(dist == UNREACHABLE) & (comp == comp[s])] = BEYOND_CUTOFF
    return out


def khop_neighbors(g: Graph, v: int, k: int) -> set[int]:
    """All nodes within ``k`` hops of ``v``, excluding ``v``."""
    if k < 1:
        raise ValueError("khop_neighbors: k must be >= 1")
    seen = {v}
    frontier = [v]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for w in g.neighbors(u).tolist():
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    seen.discard(v)
    return seen


@dataclass(frozen=True)
class Partition:
    cluster_of: np.ndarray
    centers: np.ndarray

    @property
    def num_clusters(self) -> int:
        return len(self.centers)


def cluster_centers(g: Graph, cluster_of: np.ndarray) -> np.ndarray:
    """Highest-degree node of every cluster, ties to the lowest index."""
    deg = g.degrees()
    k = int(cluster_of.max()) + 1
    centers = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(cluster_of == c)
        if members.size == 0:
            raise ValueError(f"cluster {c} is empty")
        centers[c] = members[np.argmax(deg[members])]
    return centers


def partition_from_labels(g: Graph, cluster_of) -> Partition:
    """Wrap an externally computed assignment (e.g. METIS output)."""
    cluster_of = np.asarray(cluster_of, dtype=np.int64)
    if len(cluster_of) != g.num_nodes:
        raise ValueError(f"partition has {len(cluster_of)} entries for {g.num_nodes} nodes")
    _, dense = np.unique(cluster_of, return_inverse=True)
    return Partition(_frozen(dense.astype(np.int64)), _frozen(cluster_centers(g, dense)))


def edge_cut(g: Graph, cluster_of: np.ndarray) -> int:
    e = g.edge_list()
    return int(np.sum(cluster_of[e[:, 0]] != cluster_of[e[:, 1]]))


def partition_graph(g: Graph, k: int, seed: int) -> Partition:
    """Greedy region-growing partition into ``k`` non-empty clusters.

    Seeds are picked one at a time: the highest-degree node among those
    farthest (in hops, unreachable counting as farthest) from the seeds chosen
    so far, ties broken by a seeded shuffle. Regions then grow by
    simultaneous BFS, smallest region first. Nodes in components that hold no
    seed join the smallest region as a whole. A final pass moves boundary
    nodes from oversized clusters into adjacent undersized ones.
    """
    n = g.num_nodes
    if not 1 <= k <= n:
        raise ValueError(f"partition_graph: k={k} must lie in 1..{n}")
    rng = SeedStream(seed).rng("partition")
    deg = g.degrees()
    tiebreak = rng.permutation(n)
    # order nodes by degree desc, then shuffled position
    order = np.lexsort((tiebreak, -deg))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    seeds: list[int] = []
    far = np.full(n, np.iinfo(np.int64).max)
    for _ in range(k):
        cand = np.flatnonzero(far == far.max())
        cand = cand[np.isin(cand, seeds, invert=True)] if seeds else cand
        if cand.size == 0:
            cand = np.setdiff1d(np.arange(n), seeds)
        s = int(cand[np.argmin(rank[cand])])
        seeds.append(s)
        d = bfs_distances(g, [s])[0]
        d = np.where(d == UNREACHABLE, np.iinfo(np.int64).max, d)
        far = np.minimum(far, d)
        far[seeds] = -1

    cluster_of = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    queues = [deque([s]) for s in seeds]
    for c, s in enumerate(seeds):
        cluster_of[s] = c
        sizes[c] = 1
    active = True
    while active:
        active = False
        for c in np.argsort(sizes, kind="stable"):
            q = queues[c]
            # expand one frontier node for this region
            while q:
                u = q.popleft()
                grew = False
                for w in g.neighbors(u).tolist():
                    if cluster_of[w] == -1:
                        cluster_of[w] = c
                        sizes[c] += 1
                        q.append(w)
                        grew = True
                if grew or q:
                    active = True
                    break
    from scipy.sparse.csgraph import connected_components

    _, comp = connected_components(g.adjacency, directed=False)
    for cid in np.unique(comp[cluster_of == -1]):
        members = np.flatnonzero(comp == cid)
        c = int(np.argmin(sizes))
        cluster_of[members] = c
        sizes[c] += len(members)

    _balance(g, cluster_of, sizes, set(seeds))
    return Partition(_frozen(cluster_of), _frozen(cluster_centers(g, cluster_of)))


def _balance(g: Graph, cluster_of: np.ndarray, sizes: np.ndarray, pinned: set[int]) -> None:
    target = int(np.ceil(g.num_nodes / len(sizes)))
    for u in range(g.num_nodes):
        c = cluster_of[u]
        if sizes[c] <= target or u in pinned:
            continue
        nb = cluster_of[g.neighbors(u)]
        best, best_count = -1, 0
        for d in np.unique(nb):
            if d == c or sizes[d] >= target:
                continue
            cnt = int(np.sum(nb == d))
            if cnt > best_count:
                best, best_count = int(d), cnt
        if best >= 0:
            cluster_of[u] = best
            sizes[c] -= 1
            sizes[best] += 1
