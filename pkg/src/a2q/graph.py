"""Graph ingestion, CSR adjacency, degree normalization and sparse aggregation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

FEATURE_MAGIC = b"A2QF"
UNLABELED = -1


class GraphFormatError(ValueError):
    """Raised for malformed or inconsistent graph input files."""


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Immutable adjacency in canonical CSR form.

    Rows hold sorted, duplicate-free column indices. When ``has_self_loops``
    is set every row ``i`` contains column ``i``.
    """

    num_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    has_self_loops: bool

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        rp.setflags(write=False)
        ci.setflags(write=False)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        _check_csr(self.num_nodes, rp, ci, self.has_self_loops)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @cached_property
    def degrees(self) -> np.ndarray:
        """Row lengths (d~ when self-loops are present)."""
        d = np.diff(self.row_ptr)
        d.setflags(write=False)
        return d

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data = np.ones(self.nnz, dtype=np.float64)
        return sp.csr_matrix((data, self.col_idx, self.row_ptr), shape=(self.num_nodes, self.num_nodes))

    def neighbor_degrees(self) -> np.ndarray:
        """In-degree excluding the self-loop."""
        return self.degrees - (1 if self.has_self_loops else 0)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def edge_pairs(self) -> np.ndarray:
        """Undirected (u < v) pairs, one per edge, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = rows < self.col_idx
        return np.stack([rows[keep], self.col_idx[keep]], axis=1)


def _check_csr(n, row_ptr, col_idx, self_loops):
    if n < 0 or row_ptr.shape != (n + 1,):
        raise GraphFormatError("row_ptr must have length num_nodes + 1")
    if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0) or row_ptr[-1] != col_idx.size:
        raise GraphFormatError("row_ptr is not a valid offsets array")
    if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= n):
        raise GraphFormatError("column index out of range")
    # strictly increasing within each row
    if col_idx.size > 1:
        step = np.diff(col_idx)
        row_start = np.zeros(col_idx.size, dtype=bool)
        row_start[row_ptr[:-1][np.diff(row_ptr) > 0]] = True
        if np.any((step <= 0) & ~row_start[1:]):
            raise GraphFormatError("column indices must be strictly increasing within a row")
    if self_loops:
        rows = np.repeat(np.arange(n), np.diff(row_ptr))
        if np.count_nonzero(rows == col_idx) != n:
            raise GraphFormatError("has_self_loops set but some row lacks its diagonal entry")


def from_edges(num_nodes: int, src, dst, self_loops: bool = True) -> CsrGraph:
    """Build a canonical undirected CSR graph from an edge list.

    Each pair is inserted in both directions. A pair listed twice (in either
    orientation) or an explicit self-loop is rejected.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise GraphFormatError("src and dst lengths differ")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise GraphFormatError("node index out of range")
    if np.any(src == dst):
        i = int(np.flatnonzero(src == dst)[0])
        raise GraphFormatError(f"explicit self-loop on node {src[i]} (self-loops are added implicitly)")
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key = lo * num_nodes + hi
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        k = int(uniq[np.argmax(counts > 1)])
        raise GraphFormatError(f"duplicate edge {k // num_nodes} {k % num_nodes}")
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    if self_loops:
        diag = np.arange(num_nodes, dtype=np.int64)
        rows = np.concatenate([rows, diag])
        cols = np.concatenate([cols, diag])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)
    return CsrGraph(num_nodes, row_ptr, cols, self_loops)


def canonicalize(g: CsrGraph) -> CsrGraph:
    """Rebuild ``g`` through the edge-list path; a no-op on canonical input."""
    pairs = g.edge_pairs()
    return from_edges(g.num_nodes, pairs[:, 0], pairs[:, 1], self_loops=g.has_self_loops)


def norm_coeffs(g: CsrGraph) -> np.ndarray:
    """Per-node 1/sqrt(d~_i). Requires self-loops so every degree is >= 1."""
    if not g.has_self_loops:
        raise ValueError("normalization coefficients need a graph with self-loops")
    return 1.0 / np.sqrt(g.degrees.astype(np.float64))


def aggregate(g: CsrGraph, coeffs, x: np.ndarray, mode: str, eps: float | None = None) -> np.ndarray:
    """Neighborhood aggregation.

    ``gcn_norm``: h_i = sum over j in N(i) and i of x_j / sqrt(d~_i d~_j).
    ``gin_sum``: h_i = (1 + eps) x_i + sum over j in N(i), self-loop excluded.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.num_nodes:
        raise ValueError(f"feature rows {x.shape[0]} != num_nodes {g.num_nodes}")
    if mode == "gcn_norm":
        if coeffs is None:
            raise ValueError("gcn_norm requires normalization coefficients")
        c = np.asarray(coeffs, dtype=np.float64)
        scaled = x * c[:, None] if x.ndim == 2 else x * c
        out = g.matrix @ scaled
        return out * c[:, None] if x.ndim == 2 else out * c
    if mode == "gin_sum":
        if eps is None:
            raise ValueError("gin_sum requires eps")
        out = g.matrix @ x
        if g.has_self_loops:
            out = out - x
        return out + (1.0 + eps) * x
    raise ValueError(f"unknown aggregation mode {mode!r}")


def synth_powerlaw(n: int, exponent: float, seed: int, avg_degree: float = 4.0) -> CsrGraph:
    """Heavy-tailed random graph from the static fitness model.

    Node ``i`` gets fitness ``(i + 1) ** (-1 / (exponent - 1))``; edges are
    drawn by picking both endpoints proportionally to fitness, which is
    preferential attachment on a fixed fitness sequence. Self-pairs and
    repeats are redrawn. About ``n * avg_degree / 2`` edges are produced.
    """
    if n < 2 or not exponent > 1:
        raise ValueError("synth_powerlaw needs n >= 2 and exponent > 1")
    rng = np.random.default_rng(seed)
    w = (np.arange(n) + 1.0) ** (-1.0 / (exponent - 1.0))
    p = w / w.sum()
    target = min(int(round(n * avg_degree / 2)), n * (n - 1) // 2)
    seen: set[int] = set()
    src, dst = [], []
    attempts = 0
    while len(src) < target and attempts < 50 * target + 100:
        batch = max(16, 2 * (target - len(src)))
        a = rng.choice(n, size=batch, p=p)
        b = rng.choice(n, size=batch, p=p)
        attempts += batch
        for u, v in zip(a.tolist(), b.tolist()):
            if u == v:
                continue
            k = min(u, v) * n + max(u, v)
            if k in seen:
                continue
            seen.add(k)
            src.append(u)
            dst.append(v)
            if len(src) == target:
                break
    # shuffle labels so high-fitness nodes are not simply the low indices
    perm = rng.permutation(n)
    return from_edges(n, perm[np.asarray(src, dtype=np.int64)], perm[np.asarray(dst, dtype=np.int64)])


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetSplit:
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        m = self.train_mask.astype(int) + self.val_mask.astype(int) + self.test_mask.astype(int)
        if np.any(m > 1):
            raise GraphFormatError("train/val/test masks overlap")
        if np.any(self.labels[self.train_mask] < 0):
            raise GraphFormatError("train node without a label")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def read_edge_file(path, num_nodes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'src dst', got {s!r}")
            try:
                u, v = int(parts[0], 10), int(parts[1], 10)
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node index in {s!r}") from None
            if u < 0 or v < 0 or (num_nodes is not None and (u >= num_nodes or v >= num_nodes)):
                raise GraphFormatError(f"{path}:{lineno}: node index out of range")
            src.append(u)
            dst.append(v)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def write_edge_file(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# undirected edge list: src dst\n")
        for u, v in pairs:
            fh.write(f"{int(u)} {int(v)}\n")


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: bad feature file magic")
    n, f = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * n * f:
        raise GraphFormatError(f"{path}: expected {n}x{f} floats, found {len(body)} bytes")
    x = np.frombuffer(body, dtype="<f4").reshape(n, f).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise GraphFormatError(f"{path}: non-finite feature value")
    return x


def write_features(path, x) -> None:
    x = np.asarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", *x.shape))
        fh.write(x.tobytes(order="C"))


def read_split(path, labels_path, num_nodes: int) -> DatasetSplit:
    masks = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            key, _, rest = s.partition(":")
            if key not in ("train", "val", "test") or key in masks:
                raise GraphFormatError(f"{path}: unexpected split line {key!r}")
            m = np.zeros(num_nodes, dtype=bool)
            try:
                idx = np.asarray([int(t) for t in rest.split()], dtype=np.int64)
            except ValueError:
                raise GraphFormatError(f"{path}: non-integer index on {key!r} line") from None
            if idx.size and (idx.min() < 0 or idx.max() >= num_nodes):
                raise GraphFormatError(f"{path}: {key} index out of range")
            m[idx] = True
            masks[key] = m
    if set(masks) != {"train", "val", "test"}:
        raise GraphFormatError(f"{path}: need train, val and test lines")
    labels = []
    with open(labels_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s:
                try:
                    labels.append(int(s))
                except ValueError:
                    raise GraphFormatError(f"{labels_path}:{lineno}: bad label {s!r}") from None
    if len(labels) != num_nodes:
        raise GraphFormatError(f"{labels_path}: {len(labels)} labels for {num_nodes} nodes")
    return DatasetSplit(np.asarray(labels, dtype=np.int64), masks["train"], masks["val"], masks["test"])


def write_split(path, labels_path, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, m in (("train", split.train_mask), ("val", split.val_mask), ("test", split.test_mask)):
            fh.write(key + ": " + " ".join(str(i) for i in np.flatnonzero(m)) + "\n")
    with open(labels_path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{int(v)}\n" for v in split.labels))


def load_graph(edge_file, feature_file, split_file, labels_file=None):
    """Read a dataset in the on-disk formats.

    ``labels_file`` defaults to ``labels.txt`` next to the split file.
    Returns ``(graph, features, split)``; the graph carries self-loops.
    """
    x = read_features(feature_file)
    n = x.shape[0]
    src, dst = read_edge_file(edge_file)
    if src.size and max(src.max(), dst.max()) >= n:
        raise GraphFormatError(f"{edge_file}: edge references node beyond the {n} feature rows")
    g = from_edges(n, src, dst, self_loops=True)
    if labels_file is None:
        labels_file = Path(split_file).with_name("labels.txt")
    split = read_split(split_file, labels_file, n)
    return g, x, split
