import numpy as np

from graphssl.graph import Graph


def random_graph(n, p, seed, f=4):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(len(iu)) < p
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    return Graph.from_edges(n, edges, rng.standard_normal((n, f)), np.zeros(n, dtype=int), 1)


def path_graph(n, labels=None, k=1):
    edges = [(i, i + 1) for i in range(n - 1)]
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    return Graph.from_edges(n, edges, np.eye(n), labels, k)


def floyd_warshall(g):
    n = g.num_nodes
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for u, v in g.edge_list():
        d[u, v] = d[v, u] = 1
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at ``x`` (step scaled by magnitude)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        h = eps * max(1.0, abs(x[i]))
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        dn = f(x)
        x[i] = old
        g[i] = (up - dn) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom
