"""Dataset builders: the bundled Cora citation graph and a synthetic community task."""

from __future__ import annotations

import gzip
from collections import deque
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import (
    UNLABELED,
    CsrGraph,
    DatasetSplit,
    from_edges,
    synth_powerlaw,
    write_edge_file,
    write_features,
    write_split,
)

CORA_NODES = 2708
CORA_FEATURES = 1433
CORA_CLASSES = 7


def _data_file(name: str) -> bytes:
    return resources.files("a2q").joinpath("data", name).read_bytes()


def cora_raw():
    """Parse the bundled LINQS files. Returns ``(ids, x, labels, pairs)``.

    ``pairs`` are undirected node-index pairs with u < v, deduplicated; the
    raw citation list contains both directions for some document pairs.
    """
    content = gzip.decompress(_data_file("cora.content.gz")).decode().split("\n")
    rows = [ln.split() for ln in content if ln.strip()]
    ids = [r[0] for r in rows]
    index = {pid: i for i, pid in enumerate(ids)}
    x = np.array([[float(v) for v in r[1:-1]] for r in rows])
    names = sorted({r[-1] for r in rows})
    labels = np.array([names.index(r[-1]) for r in rows], dtype=np.int64)
    pairs = set()
    for ln in gzip.decompress(_data_file("cora.cites.gz")).decode().split("\n"):
        if not ln.strip():
            continue
        a, b = ln.split()
        u, v = index[a], index[b]
        if u != v:
            pairs.add((min(u, v), max(u, v)))
    pairs = np.array(sorted(pairs), dtype=np.int64)
    return ids, x, labels, pairs


def planetoid_split(labels: np.ndarray, seed: int, per_class: int = 20, num_val: int = 500,
                    num_test: int = 1000) -> DatasetSplit:
    """``per_class`` training nodes per class, then disjoint random val/test sets."""
    rng = np.random.default_rng(seed)
    n = labels.size
    train = np.zeros(n, dtype=bool)
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        train[rng.choice(idx, size=min(per_class, idx.size), replace=False)] = True
    rest = rng.permutation(np.flatnonzero(~train))
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:num_val]] = True
    test[rest[num_val:num_val + num_test]] = True
    return DatasetSplit(labels, train, val, test)


def cora(seed: int = 0):
    """Cora as ``(graph, features, split)`` with a seeded 20-per-class split."""
    _, x, labels, pairs = cora_raw()
    g = from_edges(x.shape[0], pairs[:, 0], pairs[:, 1])
    return g, x, planetoid_split(labels, seed)


def write_cora(out_dir, seed: int = 0) -> dict[str, Path]:
    """Write Cora in the edge / feature / split / labels file formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, x, labels, pairs = cora_raw()
    split = planetoid_split(labels, seed)
    paths = {
        "edges": out / "cora.edges",
        "features": out / "cora.feat",
        "split": out / "cora.split",
        "labels": out / "labels.txt",
    }
    write_edge_file(paths["edges"], pairs)
    write_features(paths["features"], x)
    write_split(paths["split"], paths["labels"], split)
    return paths


def bfs_communities(g: CsrGraph, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Label nodes by the nearest of ``num_classes`` random seed nodes (multi-source BFS).

    Nodes unreachable from every seed get a random class.
    """
    n = g.num_nodes
    seeds = rng.choice(n, size=min(num_classes, n), replace=False)
    lab = np.full(n, -1, dtype=np.int64)
    q: deque[int] = deque()
    for c, s in enumerate(seeds.tolist()):
        lab[s] = c
        q.append(s)
    rp, ci = g.row_ptr, g.col_idx
    while q:
        u = q.popleft()
        for v in ci[rp[u]:rp[u + 1]].tolist():
            if lab[v] < 0:
                lab[v] = lab[u]
                q.append(v)
    miss = lab < 0
    lab[miss] = rng.integers(0, num_classes, int(miss.sum()))
    return lab


def synth_community(n: int, seed: int, exponent: float = 2.5, num_classes: int = 4, feat_dim: int = 16,
                    noise: float = 1.0, train_frac: float = 0.5, val_frac: float = 0.2,
                    avg_degree: float = 4.0):
    """Power-law graph with planted BFS communities and class-mean Gaussian features."""
    g = synth_powerlaw(n, exponent, seed, avg_degree=avg_degree)
    rng = np.random.default_rng([seed, 7])
    labels = bfs_communities(g, num_classes, rng)
    means = rng.normal(0.0, 1.0, (num_classes, feat_dim))
    x = means[labels] + noise * rng.normal(0.0, 1.0, (n, feat_dim))
    order = rng.permutation(n)
    n_tr = int(round(train_frac * n))
    n_va = int(round(val_frac * n))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][order[:n_tr]] = True
    masks[1][order[n_tr:n_tr + n_va]] = True
    masks[2][order[n_tr + n_va:]] = True
    return g, x, DatasetSplit(labels, *masks)


def unlabel(split: DatasetSplit, keep) -> DatasetSplit:
    """Copy of ``split`` with labels outside ``keep`` set to the unlabeled sentinel."""
    lab = split.labels.copy()
    lab[~np.asarray(keep, dtype=bool)] = UNLABELED
    return DatasetSplit(lab, split.train_mask & keep, split.val_mask & keep, split.test_mask & keep)
