"""Graphs, adjacency normalisation, the learnable adaptive adjacency and G(n, p) sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor

DEFAULT_ADAPTIVE_WIDTH = 10


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeIndex:
    """Directed (receiver, sender) pairs for message passing, sorted by receiver.

    ``recv[e]`` aggregates a message computed from ``send[e]``.
    """

    n_nodes: int
    recv: np.ndarray
    send: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.recv.shape[0])

    @cached_property
    def recv_sel(self):
        return tg.selection_matrix(self.recv, self.n_nodes)

    @cached_property
    def send_sel(self):
        return tg.selection_matrix(self.send, self.n_nodes)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.recv, minlength=self.n_nodes)

    def take(self, matrix) -> np.ndarray:
        """Per-edge entries ``matrix[recv, send]`` of a dense N x N array."""
        return np.asarray(matrix)[self.recv, self.send]

    def take_tensor(self, matrix: Tensor) -> Tensor:
        """Differentiable per-edge entries of an N x N tensor."""
        flat = tg.reshape(matrix, (self.n_nodes * self.n_nodes, 1))
        sel = tg.selection_matrix(self.recv * self.n_nodes + self.send, self.n_nodes**2)
        return tg.gather_rows(flat, sel)

    def row_normalized(self, weights: np.ndarray) -> np.ndarray:
        """Per-edge weights divided by the receiver's total (0/0 := 0)."""
        totals = np.bincount(self.recv, weights=weights, minlength=self.n_nodes)
        denom = totals[self.recv]
        return np.divide(weights, denom, out=np.zeros_like(weights, dtype=float), where=denom > 0)

    def relabel(self, perm: np.ndarray) -> "EdgeIndex":
        """Index after moving node ``i`` to position ``perm[i]``."""
        return _sorted_index(self.n_nodes, perm[self.recv], perm[self.send])


def _sorted_index(n: int, recv: np.ndarray, send: np.ndarray) -> EdgeIndex:
    recv = np.asarray(recv, dtype=np.int64)
    send = np.asarray(send, dtype=np.int64)
    order = np.lexsort((send, recv))
    return EdgeIndex(n, recv[order], send[order])


def batch_edges(indices: Sequence[EdgeIndex]) -> EdgeIndex:
    """Disjoint union; graph ``k``'s nodes are offset by the sizes before it."""
    offsets = np.cumsum([0] + [ix.n_nodes for ix in indices])
    recv = np.concatenate([ix.recv + o for ix, o in zip(indices, offsets)])
    send = np.concatenate([ix.send + o for ix, o in zip(indices, offsets)])
    return EdgeIndex(int(offsets[-1]), recv, send)


@dataclass
class Graph:
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    directed: bool = False
    _neighbors: list[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        self.weight = np.asarray(self.weight, dtype=float).reshape(-1)
        if self.n_nodes < 0:
            raise GraphError("negative node count")
        if not (self.src.shape == self.dst.shape == self.weight.shape):
            raise GraphError("src, dst and weight must have equal lengths")
        if self.src.size:
            if min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= self.n_nodes:
                raise GraphError(f"node index outside [0, {self.n_nodes})")
        if (self.weight < 0).any():
            raise GraphError("edge weights must be non-negative")
        a, b = self.src, self.dst
        if not self.directed:
            a, b = np.minimum(a, b), np.maximum(a, b)
        keys = a * max(self.n_nodes, 1) + b
        if np.unique(keys).size != keys.size:
            raise GraphError("duplicate edge")

    @classmethod
    def from_edges(cls, n_nodes: int, edges, directed: bool = False) -> "Graph":
        arr = np.asarray(edges, dtype=float).reshape(-1, 3) if len(edges) else np.zeros((0, 3))
        if arr.size and not np.all(arr[:, :2] == np.round(arr[:, :2])):
            raise GraphError("node indices must be integers")
        return cls(n_nodes, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], directed)

    @classmethod
    def from_dense(cls, adjacency, directed: bool | None = None) -> "Graph":
        a = np.asarray(adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        if directed is None:
            directed = not np.array_equal(a, a.T)
        if not directed:
            a = np.triu(a)
        src, dst = np.nonzero(a)
        return cls(a.shape[0], src, dst, a[src, dst], directed)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[self.src, self.dst] = self.weight
        if not self.directed:
            a[self.dst, self.src] = self.weight
        return a

    def neighbors(self, i: int) -> np.ndarray:
        """Nodes adjacent to ``i`` in either direction, excluding ``i``."""
        if self._neighbors is None:
            ix = self.edge_index()
            cuts = np.searchsorted(ix.recv, np.arange(self.n_nodes + 1))
            self._neighbors = [ix.send[cuts[k] : cuts[k + 1]] for k in range(self.n_nodes)]
        return self._neighbors[i]

    def degree(self) -> np.ndarray:
        return self.edge_index().in_degree

    def edge_index(self, self_loops: bool = False) -> EdgeIndex:
        keep = self.src != self.dst
        r = np.concatenate([self.src[keep], self.dst[keep]])
        s = np.concatenate([self.dst[keep], self.src[keep]])
        keys = np.unique(r * max(self.n_nodes, 1) + s)
        r, s = keys // max(self.n_nodes, 1), keys % max(self.n_nodes, 1)
        if self_loops:
            loop = np.arange(self.n_nodes)
            r, s = np.concatenate([r, loop]), np.concatenate([s, loop])
        return _sorted_index(self.n_nodes, r, s)

    def relabel(self, perm: np.ndarray) -> "Graph":
        perm = np.asarray(perm)
        return Graph(self.n_nodes, perm[self.src], perm[self.dst], self.weight.copy(), self.directed)

    def to_json(self) -> dict:
        return {
            "n_nodes": int(self.n_nodes),
            "directed": bool(self.directed),
            "edges": [[int(a), int(b), float(w)] for a, b, w in zip(self.src, self.dst, self.weight)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Graph":
        return cls.from_edges(int(doc["n_nodes"]), doc.get("edges", []), bool(doc.get("directed", False)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Graph":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def normalize_forward(adjacency) -> np.ndarray:
    a = np.asarray(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise GraphError("adjacency entries must be non-negative")
    rows = a.sum(axis=1, keepdims=True)
    return np.divide(a, rows, out=np.zeros_like(a), where=rows > 0)


def normalize_backward(adjacency) -> np.ndarray:
    return normalize_forward(np.asarray(adjacency, dtype=float).T)


def gcn_normalize(adjacency) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for a dense adjacency."""
    a = np.asarray(adjacency, dtype=float) + np.eye(len(adjacency))
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_edge_weights(index: EdgeIndex) -> np.ndarray:
    """Symmetric-normalised coefficients for an index that already holds self-loops."""
    deg = np.bincount(index.recv, minlength=index.n_nodes).astype(float)
    return 1.0 / np.sqrt(deg[index.recv] * deg[index.send])


def self_adaptive(e1, e2) -> Tensor:
    """Row-softmax of ReLU(E1 E2^T); differentiable in both factors."""
    e1, e2 = tg.as_tensor(e1), tg.as_tensor(e2)
    if e1.ndim != 2 or e2.ndim != 2 or e1.shape[1] != e2.shape[1]:
        raise tg.ShapeError(f"adaptive factors disagree: {e1.shape} vs {e2.shape}")
    return tg.softmax(tg.relu(tg.matmul(e1, tg.transpose(e2))), axis=1)


@dataclass
class AdjacencySet:
    """Matrices a spatial layer may consume.

    ``e1``/``e2`` are the learnable factors of the adaptive matrix; when absent
    only the two fixed transition matrices are exposed.
    """

    p_f: np.ndarray
    p_b: np.ndarray
    e1: Tensor | None = None
    e2: Tensor | None = None
    graph: Graph | None = None

    @classmethod
    def from_adjacency(
        cls,
        adjacency,
        adaptive_width: int | None = None,
        rng: np.random.Generator | None = None,
        graph: Graph | None = None,
    ) -> "AdjacencySet":
        a = np.asarray(adjacency, dtype=float)
        e1 = e2 = None
        if adaptive_width:
            rng = rng or np.random.default_rng(0)
            n = a.shape[0]
            e1 = Tensor(rng.normal(size=(n, adaptive_width)), requires_grad=True)
            e2 = Tensor(rng.normal(size=(n, adaptive_width)), requires_grad=True)
        return cls(normalize_forward(a), normalize_backward(a), e1, e2, graph or Graph.from_dense(a))

    @property
    def n_nodes(self) -> int:
        return self.p_f.shape[0]

    @property
    def count(self) -> int:
        return 2 + (self.e1 is not None)

    @property
    def has_adaptive(self) -> bool:
        return self.e1 is not None

    def adaptive(self) -> Tensor | None:
        return None if self.e1 is None else self_adaptive(self.e1, self.e2)

    def parameters(self) -> list[Tensor]:
        return [] if self.e1 is None else [self.e1, self.e2]

    def relabel(self, perm: np.ndarray) -> "AdjacencySet":
        """Same set with node ``i`` moved to ``perm[i]`` (adaptive factors copied)."""
        inv = np.argsort(perm)
        out = AdjacencySet(
            self.p_f[np.ix_(inv, inv)],
            self.p_b[np.ix_(inv, inv)],
            graph=self.graph.relabel(perm) if self.graph is not None else None,
        )
        if self.e1 is not None:
            out.e1 = Tensor(self.e1.data[inv], requires_grad=self.e1.requires_grad)
            out.e2 = Tensor(self.e2.data[inv], requires_grad=self.e2.requires_grad)
        return out


# ---------------------------------------------------------------------------
# Random graphs and file formats
# ---------------------------------------------------------------------------


def rng_for(*key: int) -> np.random.Generator:
    """PCG64 stream keyed by a tuple of integers (numpy SeedSequence hashing)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def gen_er_graph(n: int, p: float, seed: int | np.random.Generator) -> Graph:
    """Undirected, unweighted G(n, p): each of the n(n-1)/2 pairs kept with probability p.

    Pairs are visited in ``np.triu_indices`` order, one uniform draw each, from a
    PCG64 stream seeded with ``seed``.
    """
    if n <= 0:
        raise GraphError("graph needs at least one node")
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"edge probability {p} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return Graph(n, iu[keep], ju[keep], np.ones(int(keep.sum())), directed=False)


def load_adjacency_csv(path: str | Path) -> np.ndarray:
    """Dense row-major adjacency; a non-numeric first row is treated as a header."""
    import csv

    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise GraphError(f"{path}: empty adjacency file")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        bad = next(i for i, r in enumerate(rows) if len(r) != len(rows[0]))
        raise GraphError(f"{path}: ragged adjacency at row {bad}")
    try:
        a = np.array(rows, dtype=float)
    except ValueError:
        bad = next(i for i, r in enumerate(rows) if not all(_is_number(c) for c in r))
        col = next(j for j, c in enumerate(rows[bad]) if not _is_number(c))
        raise GraphError(f"{path}: non-numeric entry at row {bad}, column {col}") from None
    if a.shape[0] != a.shape[1]:
        raise GraphError(f"{path}: adjacency is {a.shape[0]}x{a.shape[1]}, not square")
    return a


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
