"""Structure- and attribute-based pretext tasks.

Each task has a pure target generator (deterministic in graph, config and
seed) and a :class:`Pretext` wrapper that the trainer drives: ``setup`` once,
then ``loss`` every epoch on the shared embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from graphssl import ndops as ad
from graphssl.graph import (
    UNREACHABLE,
    Graph,
    Partition,
    SplitMasks,
    bfs_distances,
    partition_from_labels,
    partition_graph,
)
from graphssl.rng import SeedStream

NUM_DIST_CATEGORIES = 4


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Graph):
        return {"num_nodes": obj.num_nodes, "edges": obj.edge_list().tolist()}
    raise TypeError(type(obj))


class _Target:
    def to_json(self) -> str:
        body = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps({"kind": type(self).__name__, **body}, default=_jsonable)


# --------------------------------------------------------------------------
# target generators

@dataclass(frozen=True)
class Degrees(_Target):
    degrees: np.ndarray


def node_property_targets(g: Graph) -> Degrees:
    return Degrees(g.degrees().astype(np.float64))


@dataclass(frozen=True)
class EdgePairs(_Target):
    positive: np.ndarray
    negative: np.ndarray
    masked_graph: Graph


def _sample_non_edges(g: Graph, m: int, rng: np.random.Generator) -> np.ndarray:
    n = g.num_nodes
    total = n * (n - 1) // 2
    free = total - g.num_edges
    if m > free:
        raise ValueError(f"cannot sample {m} non-adjacent pairs; only {free} exist")
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if free < 4 * m or total <= 200_000:
        iu, ju = np.triu_indices(n, 1)
        keep = ~np.asarray(g.adjacency[iu, ju]).ravel()
        cand = np.stack([iu[keep], ju[keep]], axis=1)
        return cand[np.sort(rng.choice(len(cand), size=m, replace=False))]
    chosen: dict[int, None] = {}
    while len(chosen) < m:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        i, j = min(i, j), max(i, j)
        code = int(i) * n + int(j)
        if code in chosen or g.has_edge(int(i), int(j)):
            continue
        chosen[code] = None
    codes = np.fromiter(chosen, dtype=np.int64)
    return np.stack([codes // n, codes % n], axis=1)


def edgemask_setup(g: Graph, m_e: int, seed: int) -> EdgePairs:
    """Hide ``m_e`` edges and draw as many non-adjacent pairs."""
    if m_e < 0 or m_e > g.num_edges:
        raise ValueError(f"edgemask_setup: m_e={m_e} exceeds the {g.num_edges} edges")
    streams = SeedStream(seed)
    edges = g.edge_list()
    pick = np.sort(streams.rng("edgemask-pos").choice(len(edges), size=m_e, replace=False))
    pos = edges[pick]
    neg = _sample_non_edges(g, m_e, streams.rng("edgemask-neg"))
    masked = g.without_edges(pos) if m_e else g
    return EdgePairs(pos, neg, masked)


@dataclass(frozen=True)
class DistPairs(_Target):
    pairs: np.ndarray
    categories: np.ndarray


class DistanceCategories:
    """Hop-distance bins {1, 2, 3, >=4} for every unordered node pair.

    Pairs within three hops are stored explicitly; everything else
    (including disconnected pairs) belongs to the last bin.
    """

    def __init__(self, g: Graph, cutoff: int = 4):
        n = g.num_nodes
        if n < 2:
            raise ValueError("pairwise distance needs at least 2 nodes")
        self.num_nodes = n
        self.cutoff = cutoff
        near = [[] for _ in range(cutoff - 1)]
        dist = bfs_distances(g, range(n), cutoff=cutoff - 1)
        for i in range(n):
            row = dist[i, i + 1:]
            for d in range(1, cutoff):
                js = np.flatnonzero(row == d) + i + 1
                near[d - 1].append(i * n + js)
        self.near = [np.concatenate(c) if c else np.zeros(0, np.int64) for c in near]
        self._near_codes = set(np.concatenate(self.near).tolist()) if n else set()
        self.num_far = n * (n - 1) // 2 - len(self._near_codes)
        self._far = None

    def category(self, i: int, j: int) -> int:
        i, j = min(i, j), max(i, j)
        code = i * self.num_nodes + j
        for c, codes in enumerate(self.near):
            k = np.searchsorted(codes, code)
            if k < len(codes) and codes[k] == code:
                return c
        return self.cutoff - 1

    def dense(self) -> np.ndarray:
        """Full N x N category matrix (diagonal -1); for small graphs only."""
        n = self.num_nodes
        out = np.full((n, n), self.cutoff - 1, dtype=np.int64)
        for c, codes in enumerate(self.near):
            out[codes // n, codes % n] = c
            out[codes % n, codes // n] = c
        np.fill_diagonal(out, -1)
        return out

    def _sample_far(self, m: int, rng: np.random.Generator) -> np.ndarray:
        n = self.num_nodes
        if m == 0:
            return np.zeros(0, dtype=np.int64)
        if self.num_far < 4 * m or n * (n - 1) // 2 <= 200_000:
            if self._far is None:
                iu, ju = np.triu_indices(n, 1)
                codes = iu * n + ju
                near = np.fromiter(self._near_codes, np.int64, len(self._near_codes))
                self._far = codes[~np.isin(codes, near)]
            return self._far[rng.choice(len(self._far), size=m, replace=False)]
        chosen: dict[int, None] = {}
        while len(chosen) < m:
            i, j = rng.integers(0, n, size=2)
            if i == j:
                continue
            code = int(min(i, j)) * n + int(max(i, j))
            if code in self._near_codes or code in chosen:
                continue
            chosen[code] = None
        return np.fromiter(chosen, dtype=np.int64)

    def sample_pairs(self, n_pairs: int, rng: np.random.Generator) -> DistPairs:
        """Class-balanced pairs without repeats; short bins backfill from the last."""
        if n_pairs < NUM_DIST_CATEGORIES:
            raise ValueError("sample_pairs: need at least 4 pairs")
        quota = n_pairs // NUM_DIST_CATEGORIES
        codes, cats = [], []
        for c, pool in enumerate(self.near):
            take = min(quota, len(pool))
            codes.append(pool[rng.choice(len(pool), size=take, replace=False)] if take else pool[:0])
            cats.append(np.full(take, c))
        far_quota = min(n_pairs - sum(len(c) for c in codes), self.num_far)
        far = self._sample_far(far_quota, rng)
        codes.append(far)
        cats.append(np.full(len(far), self.cutoff - 1))
        codes = np.concatenate(codes)
        n = self.num_nodes
        pairs = np.stack([codes // n, codes % n], axis=1)
        return DistPairs(pairs, np.concatenate(cats).astype(np.int64))


def pairwise_distance_targets(g: Graph, cutoff: int = 4) -> DistanceCategories:
    return DistanceCategories(g, cutoff)


@dataclass(frozen=True)
class ClusterDists(_Target):
    distances: np.ndarray
    cluster_of: np.ndarray
    centers: np.ndarray


def distance2clusters_targets(g: Graph, k: int, seed: int,
                              partition: Partition | None = None) -> ClusterDists:
    """Hop distance from every node to every cluster center; unreachable -> N."""
    part = partition if partition is not None else partition_graph(g, k, seed)
    d = bfs_distances(g, part.centers).T.astype(np.float64)
    d[d == UNREACHABLE] = g.num_nodes
    return ClusterDists(d, part.cluster_of, part.centers)


@dataclass(frozen=True)
class AttrMask(_Target):
    masked_nodes: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray


def attributemask_setup(x: np.ndarray, m_a: int, d_pca: int, seed: int,
                        pca: np.ndarray | None = None) -> AttrMask:
    """PCA-reduce ``x``, zero the rows of ``m_a`` random nodes, keep originals as targets."""
    n = x.shape[0]
    if not 0 <= m_a <= n:
        raise ValueError(f"attributemask_setup: m_a={m_a} must lie in 0..{n}")
    reduced = ad.pca_reduce(x, d_pca) if pca is None else pca
    nodes = np.sort(SeedStream(seed).rng("attrmask").choice(n, size=m_a, replace=False))
    inputs = reduced.copy()
    inputs[nodes] = 0.0
    return AttrMask(nodes, inputs, reduced[nodes].copy())


@dataclass(frozen=True)
class AttrSimPairs(_Target):
    pairs: np.ndarray
    similarity: np.ndarray
    num_similar: int


def pairwise_attrsim_pairs(x: np.ndarray, k_pairs: int, anchors=None) -> AttrSimPairs:
    """Top-K most and least similar partners (cosine) for every anchor node.

    Similarities are ranked at 12 decimal places; ties go to the lower partner index. Unordered duplicates are merged; the
    first ``num_similar`` rows come from the top-K side.
    """
    n = x.shape[0]
    if k_pairs < 1:
        raise ValueError("pairwise_attrsim_pairs: K must be >= 1")
    if n < k_pairs + 1:
        raise ValueError(f"pairwise_attrsim_pairs: {n} nodes cannot supply {k_pairs} partners")
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    sim = ad.cosine_matrix(x[anchors], x)
    sim[np.arange(len(anchors)), anchors] = np.nan
    seen: dict[tuple, float] = {}
    for side in ("top", "bottom"):
        for r, i in enumerate(anchors):
            row = sim[r]
            valid = np.flatnonzero(~np.isnan(row))
            # rounding makes exact ties robust to last-ulp noise in the cosine
            r12 = np.round(row[valid], 12)
            key = -r12 if side == "top" else r12
            chosen = valid[np.argsort(key, kind="stable")[:k_pairs]]
            for j in chosen:
                pair = (int(min(i, j)), int(max(i, j)))
                if pair not in seen:
                    seen[pair] = float(row[j])
        if side == "top":
            num_similar = len(seen)
    pairs = np.array(list(seen), dtype=np.int64).reshape(-1, 2)
    return AttrSimPairs(pairs, np.array(list(seen.values())), num_similar)


# --------------------------------------------------------------------------
# trainer-facing tasks

class Pretext:
    """Base class. Subclasses fill ``output_dim`` during :meth:`setup`."""

    name = "pretext"
    output_dim = 0
    resample_each_epoch = False

    def setup(self, g: Graph, masks: SplitMasks, x: np.ndarray, seeds: SeedStream) -> None:
        raise NotImplementedError

    def input_graph(self, g: Graph) -> Graph:
        return g

    def input_features(self, x: np.ndarray) -> np.ndarray:
        return x

    def loss(self, model, bound: dict, z: ad.DiffValue, epoch: int) -> ad.DiffValue:
        raise NotImplementedError

    def classification_instances(self, seeds: SeedStream):
        """(pairs or nodes, labels) for probing; None when not a classification task."""
        return None


def _zero() -> ad.DiffValue:
    return ad.DiffValue(np.asarray(0.0))


class NodeProperty(Pretext):
    name = "nodeproperty"

    def setup(self, g, masks, x, seeds):
        self.target = node_property_targets(g)
        self.rows = masks.unlabeled(g.num_nodes)
        self.output_dim = 1

    def loss(self, model, bound, z, epoch):
        out = model.forward_ssl(z, bound, self.output_dim)
        return ad.mse(out, self.target.degrees, self.rows)

    def classification_instances(self, seeds):
        bins = np.clip(self.target.degrees.astype(np.int64), 1, 4) - 1
        return self.rows, bins[self.rows]


class EdgeMask(Pretext):
    name = "edgemask"

    def __init__(self, mask_ratio: float = 0.1, m_e: int | None = None):
        self.mask_ratio = mask_ratio
        self.m_e = m_e

    def setup(self, g, masks, x, seeds):
        m = self.m_e if self.m_e is not None else int(round(self.mask_ratio * g.num_nodes))
        m = min(m, g.num_edges)
        self.target = edgemask_setup(g, m, seeds.seed("edgemask"))
        t = self.target
        self.pairs = np.concatenate([t.positive, t.negative]).reshape(-1, 2)
        self.labels = np.concatenate([np.ones(len(t.positive)), np.zeros(len(t.negative))])
        self.output_dim = 1

    def input_graph(self, g):
        return self.target.masked_graph

    def loss(self, model, bound, z, epoch):
        if len(self.pairs) == 0:
            return _zero()
        out = model.forward_pairs(z, self.pairs, bound, self.output_dim)
        # mean over positives plus mean over negatives
        return ad.bce_with_logits(out, self.labels, weights=np.full(len(self.labels), 2.0))

    def classification_instances(self, seeds):
        return self.pairs, self.labels.astype(np.int64)


class PairwiseDistance(Pretext):
    name = "pairwisedistance"
    resample_each_epoch = True

    def __init__(self, num_pairs: int = 4000):
        self.num_pairs = num_pairs

    def setup(self, g, masks, x, seeds):
        self.cats = pairwise_distance_targets(g)
        self.seeds = seeds
        self.output_dim = NUM_DIST_CATEGORIES

    def batch(self, epoch: int) -> DistPairs:
        return self.cats.sample_pairs(self.num_pairs, self.seeds.rng("pairwise-sample", epoch))

    def loss(self, model, bound, z, epoch):
        b = self.batch(epoch)
        out = model.forward_pairs(z, b.pairs, bound, self.output_dim)
        return ad.softmax_cross_entropy(out, b.categories, np.arange(len(b.pairs)))

    def classification_instances(self, seeds):
        b = self.cats.sample_pairs(self.num_pairs, seeds.rng("probe-pairs"))
        return b.pairs, b.categories


class Distance2Clusters(Pretext):
    name = "distance2clusters"

    def __init__(self, num_clusters: int = 10, partition=None):
        self.num_clusters = num_clusters
        self.partition = partition

    def setup(self, g, masks, x, seeds):
        part = None
        if self.partition is not None:
            part = partition_from_labels(g, self.partition)
        k = min(self.num_clusters, g.num_nodes)
        self.target = distance2clusters_targets(g, k, seeds.seed("partition"), part)
        self.rows = masks.unlabeled(g.num_nodes)
        self.output_dim = self.target.distances.shape[1]

    def loss(self, model, bound, z, epoch):
        out = model.forward_ssl(z, bound, self.output_dim)
        return ad.mse(out, self.target.distances, self.rows)


class AttributeMask(Pretext):
    """Reconstruct PCA features of masked nodes; the whole model sees PCA input."""

    name = "attributemask"

    def __init__(self, mask_ratio: float = 0.1, m_a: int | None = None, d_pca: int = 256,
                 pca: np.ndarray | None = None):
        self.mask_ratio = mask_ratio
        self.m_a = m_a
        self.d_pca = d_pca
        self.pca = pca

    def setup(self, g, masks, x, seeds):
        m = self.m_a if self.m_a is not None else int(round(self.mask_ratio * g.num_nodes))
        d = min(self.d_pca, *x.shape)
        pca = self.pca if self.pca is not None else ad.pca_reduce(x, d)
        self.target = attributemask_setup(x, m, d, seeds.seed("attrmask"), pca=pca)
        self.output_dim = pca.shape[1]

    def input_features(self, x):
        return self.target.inputs

    def loss(self, model, bound, z, epoch):
        if len(self.target.masked_nodes) == 0:
            return _zero()
        out = model.forward_ssl(z, bound, self.output_dim)
        full = np.zeros((out.shape[0], self.output_dim))
        full[self.target.masked_nodes] = self.target.targets
        return ad.mse(out, full, self.target.masked_nodes)


class PairwiseAttrSim(Pretext):
    name = "pairwiseattrsim"

    def __init__(self, k_pairs: int = 3):
        self.k_pairs = k_pairs

    def setup(self, g, masks, x, seeds):
        self.target = pairwise_attrsim_pairs(x, self.k_pairs, masks.unlabeled(g.num_nodes))
        self.output_dim = 1

    def loss(self, model, bound, z, epoch):
        out = model.forward_pairs(z, self.target.pairs, bound, self.output_dim)
        return ad.mse(out, self.target.similarity)
