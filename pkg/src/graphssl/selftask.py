"""Label-aware pretext tasks built on weak labelers.

Weak labelers (label propagation, iterative classification) extend the
training labels to every node; the resulting hard labels define each
node's k-hop label distribution, which the SSL head regresses. The
corrected variant periodically relabels unlabeled nodes by cosine
similarity to dense class prototypes in embedding space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from graphssl import ndops as ad
from graphssl.graph import UNREACHABLE, Graph, bfs_distances
from graphssl.pretext import Pretext
from graphssl.rng import SeedStream


@dataclass(frozen=True)
class WeakLabels:
    probs: np.ndarray

    @property
    def hard(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def _check_seeds(labels: np.ndarray, train: np.ndarray, k: int) -> None:
    present = np.bincount(labels[train], minlength=k)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise ValueError(f"classes without labeled nodes: {missing.tolist()}")


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def label_propagation(g: Graph, train, tol: float = 1e-6, max_iter: int = 1000) -> WeakLabels:
    """Iterate F <- D^-1 (A + I) F with the labeled rows clamped to one-hot."""
    train = np.asarray(train, dtype=np.int64)
    k = g.num_classes
    _check_seeds(g.labels, train, k)
    n = g.num_nodes
    a = (g.adjacency.astype(np.float64) + sp.identity(n, format="csr")).tocsr()
    p = sp.diags(1.0 / np.asarray(a.sum(axis=1)).ravel()) @ a
    seeds = _one_hot(g.labels[train], k)
    f = np.zeros((n, k))
    f[train] = seeds
    for _ in range(max_iter):
        nxt = p @ f
        nxt[train] = seeds
        change = np.max(np.abs(nxt - f))
        f = nxt
        if change < tol:
            break
    s = f.sum(axis=1, keepdims=True)
    f = np.divide(f, s, out=np.full_like(f, 1.0 / k), where=s > 0)
    f[train] = seeds
    return WeakLabels(f)


def _neighbor_counts(g: Graph, labels: np.ndarray, k: int) -> np.ndarray:
    return np.asarray(g.adjacency.astype(np.float64) @ _one_hot(labels, k))


def ica(g: Graph, x: np.ndarray, train, rounds: int = 10, seed: int = 0,
        steps: int = 200, lr: float = 0.1, weight_decay: float = 1e-4) -> WeakLabels:
    """Iterative classification with neighbor-label-proportion features.

    A feature-only classifier bootstraps labels for unlabeled nodes; a second
    classifier on ``[x || neighbor label proportions]`` then re-predicts the
    unlabeled nodes ``rounds`` times in a seeded random order, updating the
    relational features in place.
    """
    train = np.asarray(train, dtype=np.int64)
    k = g.num_classes
    _check_seeds(g.labels, train, k)
    n = g.num_nodes
    x = np.asarray(x, dtype=np.float64)
    y = g.labels
    attr = ad.LogisticRegression(k, steps, lr, weight_decay).fit(x, y, train)
    attr_probs = attr.predict_proba(x)
    attr_probs[train] = _one_hot(y[train], k)
    if rounds == 0:
        return WeakLabels(attr_probs)

    current = np.argmax(attr_probs, axis=1)
    current[train] = y[train]
    deg = g.degrees().astype(np.float64)
    safe_deg = np.maximum(deg, 1.0)[:, None]
    counts = _neighbor_counts(g, current, k)
    rel = ad.LogisticRegression(k, steps, lr, weight_decay).fit(
        np.hstack([x, counts / safe_deg]), y, train)
    w_x, w_r = rel.weight[:x.shape[1]], rel.weight[x.shape[1]:]
    base = x @ w_x + rel.bias
    unlabeled = np.setdiff1d(np.arange(n), train)
    rng = SeedStream(seed).rng("ica-order")
    for _ in range(rounds):
        for u in rng.permutation(unlabeled):
            new = int(np.argmax(base[u] + (counts[u] / safe_deg[u]) @ w_r))
            old = current[u]
            if new != old:
                nb = g.neighbors(u)
                counts[nb, old] -= 1.0
                counts[nb, new] += 1.0
                current[u] = new
    probs = ad.softmax(base + (counts / safe_deg) @ w_r)
    probs[train] = _one_hot(y[train], k)
    return WeakLabels(probs)


def ensemble_labels(lp: WeakLabels, ica_labels: WeakLabels, true_labels=None, train=None) -> np.ndarray:
    """Argmax of summed class probabilities, ties to the lowest class."""
    if lp.probs.shape != ica_labels.probs.shape:
        raise ValueError(f"shape mismatch: {lp.probs.shape} vs {ica_labels.probs.shape}")
    out = np.argmax(lp.probs + ica_labels.probs, axis=1)
    if train is not None:
        out[train] = np.asarray(true_labels)[train]
    return out


def distance2labeled_targets(g: Graph, train) -> np.ndarray:
    """(mean, min, max) hop distance to the labeled nodes of each class.

    Unreachable labeled nodes are left out; if none of a class is reachable
    the triple is (N, N, N).
    """
    train = np.asarray(train, dtype=np.int64)
    k = g.num_classes
    _check_seeds(g.labels, train, k)
    n = g.num_nodes
    dist = bfs_distances(g, train).astype(np.float64)
    out = np.empty((n, 3 * k))
    for c in range(k):
        d = dist[g.labels[train] == c]
        reach = d != UNREACHABLE
        cnt = reach.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(reach, d, 0.0).sum(axis=0) / cnt
        mn = np.where(reach, d, np.inf).min(axis=0)
        mx = np.where(reach, d, -np.inf).max(axis=0)
        none = cnt == 0
        out[:, 3 * c] = np.where(none, n, mean)
        out[:, 3 * c + 1] = np.where(none, n, mn)
        out[:, 3 * c + 2] = np.where(none, n, mx)
    return out


def khop_matrix(g: Graph, k: int) -> sp.csr_matrix:
    """Boolean reachability within ``k`` hops, diagonal removed."""
    if k < 1:
        raise ValueError("hop radius must be >= 1")
    a = g.adjacency.astype(np.int64)
    reach = a.copy()
    power = a.copy()
    for _ in range(k - 1):
        power = ((power @ a) > 0).astype(np.int64)
        reach = ((reach + power) > 0).astype(np.int64)
    reach = reach.tolil()
    reach.setdiag(0)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    return reach


def context_label_targets(g: Graph, labels_all, k: int = 2, reach: sp.csr_matrix | None = None) -> np.ndarray:
    """Label distribution over each node's k-hop context.

    Nodes with an empty context get the global label distribution.
    """
    labels_all = np.asarray(labels_all, dtype=np.int64)
    if labels_all.shape != (g.num_nodes,) or np.any(labels_all < 0):
        raise ValueError("context_label_targets: every node needs a class")
    kk = g.num_classes
    reach = khop_matrix(g, k) if reach is None else reach
    counts = np.asarray(reach.astype(np.float64) @ _one_hot(labels_all, kk))
    sizes = counts.sum(axis=1, keepdims=True)
    fallback = np.bincount(labels_all, minlength=kk) / len(labels_all)
    return np.where(sizes > 0, counts / np.where(sizes > 0, sizes, 1.0), fallback)


def density_threshold(sim: np.ndarray) -> float:
    """Off-diagonal similarity at descending rank ceil(0.4 * count)."""
    iu = np.triu_indices(len(sim), 1)
    vals = np.sort(sim[iu])[::-1]
    if vals.size == 0:
        return 1.0
    return float(vals[math.ceil(0.4 * vals.size) - 1])


def densities(sim: np.ndarray) -> np.ndarray:
    return np.sign(sim - density_threshold(sim)).sum(axis=1)


def select_prototypes(z: np.ndarray, members: np.ndarray, m: int, p: int,
                      rng: np.random.Generator) -> np.ndarray:
    sample = np.sort(rng.choice(members, size=min(m, len(members)), replace=False))
    rho = densities(ad.cosine_matrix(z[sample]))
    order = np.lexsort((sample, -rho))
    return sample[order[:min(p, len(sample))]]


def correct_labels(z: np.ndarray, labels_all, train, m: int = 100, p: int = 5,
                   seed: int = 0, num_classes: int | None = None) -> np.ndarray:
    """Relabel every non-training node by mean cosine similarity to class prototypes."""
    labels_all = np.asarray(labels_all, dtype=np.int64)
    train = np.asarray(train, dtype=np.int64)
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ad.NonFiniteError("correct_labels: embeddings contain NaN or Inf")
    k = num_classes if num_classes is not None else int(labels_all.max()) + 1
    streams = SeedStream(seed)
    scores = np.empty((len(z), k))
    for c in range(k):
        members = np.flatnonzero(labels_all == c)
        if members.size == 0:
            raise ValueError(f"correct_labels: class {c} has no nodes")
        protos = select_prototypes(z, members, m, p, streams.rng("prototypes", c))
        scores[:, c] = ad.cosine_matrix(z, z[protos]).mean(axis=1)
    out = np.argmax(scores, axis=1)
    out[train] = labels_all[train]
    return out


def corrected_context_loss(pred: ad.DiffValue, ybar: np.ndarray, yhat_context: np.ndarray,
                           alpha: float, rows) -> ad.DiffValue:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return ad.total([(1.0, ad.mse(pred, ybar, rows)), (alpha, ad.mse(pred, yhat_context, rows))])


def corrected_label_schedule(train_epochs: Callable[[int], None], correct: Callable[[], int],
                             rounds: int, total_epochs: int) -> list[int]:
    """Alternate training and correction; returns label changes per round.

    The last round absorbs the remainder when epochs do not divide evenly.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    per = total_epochs // rounds
    changes = []
    for r in range(rounds):
        train_epochs(per if r < rounds - 1 else total_epochs - per * (rounds - 1))
        changes.append(correct())
    return changes


# --------------------------------------------------------------------------
# trainer-facing tasks

def run_labeler(name: str, g: Graph, x: np.ndarray, train, seed: int) -> WeakLabels:
    if name == "lp":
        return label_propagation(g, train)
    if name == "ica":
        return ica(g, x, train, seed=seed)
    raise ValueError(f"unknown weak labeler {name!r} (lp | ica)")


class Distance2Labeled(Pretext):
    name = "distance2labeled"

    def setup(self, g, masks, x, seeds):
        self.target = distance2labeled_targets(g, masks.train)
        self.rows = masks.unlabeled(g.num_nodes)
        self.output_dim = self.target.shape[1]

    def loss(self, model, bound, z, epoch):
        return ad.mse(model.forward_ssl(z, bound, self.output_dim), self.target, self.rows)


class ContextLabel(Pretext):
    name = "contextlabel"

    def __init__(self, labeler: str = "ica", hops: int = 2):
        self.labeler = labeler
        self.hops = hops

    def weak_labels(self, g, masks, x, seeds) -> np.ndarray:
        labels = run_labeler(self.labeler, g, x, masks.train, seeds.seed("ica")).hard
        labels[masks.train] = g.labels[masks.train]
        return labels

    def setup(self, g, masks, x, seeds):
        self.graph = g
        self.reach = khop_matrix(g, self.hops)
        self.labels_all = self.weak_labels(g, masks, x, seeds)
        self.ybar = context_label_targets(g, self.labels_all, self.hops, self.reach)
        self.rows = masks.unlabeled(g.num_nodes)
        self.output_dim = g.num_classes

    def loss(self, model, bound, z, epoch):
        return ad.mse(model.forward_ssl(z, bound, self.output_dim), self.ybar, self.rows)


class EnsembleLabel(ContextLabel):
    name = "ensemblelabel"

    def __init__(self, hops: int = 2):
        super().__init__("ensemble", hops)

    def weak_labels(self, g, masks, x, seeds):
        lp = label_propagation(g, masks.train)
        ic = ica(g, x, masks.train, seed=seeds.seed("ica"))
        return ensemble_labels(lp, ic, g.labels, masks.train)


class CorrectedLabel(ContextLabel):
    """ContextLabel plus a second target built from periodically corrected labels."""

    name = "correctedlabel"

    def __init__(self, labeler: str = "ica", hops: int = 2, alpha: float = 1.0, rounds: int = 3,
                 m: int = 100, p: int = 5):
        super().__init__(labeler, hops)
        self.alpha = alpha
        self.rounds = rounds
        self.m = m
        self.p = p

    def setup(self, g, masks, x, seeds):
        super().setup(g, masks, x, seeds)
        self.train = masks.train
        self.seeds = seeds
        self.corrected = self.labels_all.copy()
        self.yhat = self.ybar.copy()
        self.round = 0

    def loss(self, model, bound, z, epoch):
        out = model.forward_ssl(z, bound, self.output_dim)
        return corrected_context_loss(out, self.ybar, self.yhat, self.alpha, self.rows)

    def correct(self, z: np.ndarray) -> int:
        new = correct_labels(z, self.corrected, self.train, self.m, self.p,
                             self.seeds.seed("correct", self.round), self.graph.num_classes)
        changed = int(np.sum(new != self.corrected))
        self.corrected = new
        self.yhat = context_label_targets(self.graph, new, self.hops, self.reach)
        self.round += 1
        return changed
