"""Directed sensor/region graphs and the weighted Laplacian used by the models."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs or mismatched array shapes."""


@dataclass(frozen=True, eq=False)
class DirectedGraph:
    """A directed graph stored as parallel ``src``/``dst`` index arrays.

    Edge order is significant: per-edge weight vectors are aligned with it.
    An out-adjacency index (CSR offsets into the edges sorted by source) is
    built once so neighbor iteration costs O(degree).
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    _out_order: np.ndarray = field(init=False, repr=False)
    _out_ptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        if int(self.n) < 1:
            raise GraphError(f"vertex count must be positive, got {self.n}")
        if src.shape != dst.shape:
            raise GraphError("src and dst must have equal length")
        if src.size and (src.min() < 0 or dst.min() < 0 or src.max() >= self.n or dst.max() >= self.n):
            raise GraphError(f"edge endpoint out of range [0, {self.n})")
        if np.any(src == dst):
            raise GraphError("self-loops are not allowed")
        keys = src * self.n + dst
        if np.unique(keys).size != keys.size:
            raise GraphError("duplicate edges")
        src.setflags(write=False)
        dst.setflags(write=False)
        order = np.argsort(src, kind="stable")
        ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=self.n), out=ptr[1:])
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "_out_order", order)
        object.__setattr__(self, "_out_ptr", ptr)

    @classmethod
    def from_edges(cls, n, edges) -> "DirectedGraph":
        edges = list(edges)
        if not edges:
            return cls(n, np.zeros(0, np.int64), np.zeros(0, np.int64))
        arr = np.asarray(edges, dtype=np.int64)
        return cls(n, arr[:, 0], arr[:, 1])

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def out_edges(self, i: int) -> np.ndarray:
        """Edge indices leaving vertex ``i``, in edge-list order."""
        return self._out_order[self._out_ptr[i]:self._out_ptr[i + 1]]

    def is_one_directional(self) -> bool:
        """True when no pair (i, j) has both directions present."""
        fwd = set(zip(self.src.tolist(), self.dst.tolist()))
        return not any((j, i) in fwd for i, j in fwd)

    def edge_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.n).encode())
        h.update(self.src.tobytes())
        h.update(self.dst.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, DirectedGraph):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst))

    def __hash__(self):
        return hash(self.edge_hash())


def reaction_graph(g: DirectedGraph) -> DirectedGraph:
    """Edge-transposed graph; edge ``k`` of the result is edge ``k`` of ``g`` reversed."""
    return DirectedGraph(g.n, g.dst.copy(), g.src.copy())


def scatter_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values[..., e]`` into ``out[..., index[e]]`` along the last axis."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    lead = values.shape[:-1]
    rows = int(np.prod(lead))
    flat = values.reshape(rows, values.shape[-1])
    keys = (index[None, :] + n * np.arange(rows)[:, None]).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=rows * n)
    return out.reshape(*lead, n)


def _check_weights(g: DirectedGraph, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (g.num_edges,):
        raise GraphError(f"expected {g.num_edges} edge weights, got shape {w.shape}")
    return w


def _check_features(g: DirectedGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != g.n:
        raise GraphError(f"expected trailing dimension {g.n}, got shape {x.shape}")
    return x


def apply_weighted_laplacian(g: DirectedGraph, w, x, edge_mask=None) -> np.ndarray:
    """Neighbor-difference operator ``out_i = sum_{(i,j) in E} w_ij (x_j - x_i)``.

    ``x`` may be a single feature vector ``(n,)`` or a batch ``(..., n)``.
    ``edge_mask`` (broadcastable to ``(..., |E|)``) zeroes individual edge
    terms, which is how missing observations are kept out of neighbor sums.
    """
    w = _check_weights(g, w)
    x = _check_features(g, x)
    diff = x[..., g.dst] - x[..., g.src]
    terms = diff * w
    if edge_mask is not None:
        terms = terms * edge_mask
    return scatter_sum(terms, g.src, g.n)


def neighbor_select(x, g: DirectedGraph) -> list[list[float]]:
    """Per-vertex lists of out-neighbor features, in edge order."""
    x = _check_features(g, x)
    if x.ndim != 1:
        raise GraphError("neighbor_select takes a single feature vector")
    return [[float(x[g.dst[e]]) for e in g.out_edges(i)] for i in range(g.n)]


def ring_graph(n: int) -> DirectedGraph:
    """Directed ring ``i -> i+1 (mod n)``; a single vertex gets no edges."""
    if n < 2:
        return DirectedGraph.from_edges(n, [])
    if n == 2:
        return DirectedGraph.from_edges(2, [(0, 1)])
    idx = np.arange(n)
    return DirectedGraph(n, idx, (idx + 1) % n)


def random_one_directional(n: int, m: int, rng: np.random.Generator) -> DirectedGraph:
    """Random weakly connected graph with ``m`` edges and no reciprocal pairs.

    A random spanning tree is laid first (each tree edge oriented by a coin
    flip), then extra unordered pairs are added until ``m`` edges exist.
    """
    max_edges = n * (n - 1) // 2
    if m < n - 1 or m > max_edges:
        raise GraphError(f"cannot place {m} one-directional edges on {n} vertices")
    perm = rng.permutation(n)
    pairs = []
    seen = set()
    for k in range(1, n):
        a, b = int(perm[k]), int(perm[rng.integers(0, k)])
        pairs.append((a, b))
        seen.add((min(a, b), max(a, b)))
    while len(pairs) < m:
        a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        pairs.append((a, b))
    edges = [(a, b) if rng.random() < 0.5 else (b, a) for a, b in pairs]
    return DirectedGraph.from_edges(n, edges)


def load_edges(path, n: int | None = None) -> DirectedGraph:
    """Read a ``src,dst`` CSV of zero-based vertex ids.

    ``n`` defaults to one more than the largest id present.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"edge file not found: {path}")
    edges = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise GraphError(f"{path}: expected header 'src,dst', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                edges.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise GraphError(f"{path}:{lineno}: non-integer vertex id") from exc
    if n is None:
        n = 1 + max((max(e) for e in edges), default=0)
    return DirectedGraph.from_edges(n, edges)


def write_edges(path, g: DirectedGraph) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst"])
        writer.writerows(g.edges)
