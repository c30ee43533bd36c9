"""Spatial layers for the three GNN flavors.

Node features are laid out node-axis first: ``(N, *batch, d)``. The same layer
code therefore serves a single graph ``(N, d)`` and the backbone's
``(N, batch, time, d)`` blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .graphs import AdjacencySet, EdgeIndex, Graph, batch_edges, gcn_edge_weights, gcn_normalize
from .tensorgrad import MlpParams, Tensor, init_uniform, make_mlp, mlp_apply

FLAVORS = ("gcn", "diffusion", "gat", "mpnn")


class MessageCounter:
    """Counts MLP_2 evaluations made by :func:`mpnn_forward`."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


message_counter = MessageCounter()


# ---------------------------------------------------------------------------
# Graph context shared by all flavors
# ---------------------------------------------------------------------------


@dataclass
class GraphContext:
    """Everything a spatial layer may read about the graph for one forward pass.

    ``index`` has no self-loops; ``index_loops`` adds one per node. ``p_f``,
    ``p_b`` are the dense transition matrices when available (single graph),
    ``edge_pf``/``edge_pb`` the same values per edge of ``index``.
    """

    n_nodes: int
    index: EdgeIndex
    index_loops: EdgeIndex
    gcn_weights: np.ndarray
    edge_pf: np.ndarray
    edge_pb: np.ndarray
    p_f: np.ndarray | None = None
    p_b: np.ndarray | None = None
    adaptive: Tensor | None = None

    @classmethod
    def from_adjacency(cls, adj: AdjacencySet) -> "GraphContext":
        graph = adj.graph if adj.graph is not None else Graph.from_dense(adj.p_f)
        index = graph.edge_index()
        loops = graph.edge_index(self_loops=True)
        return cls(
            n_nodes=adj.n_nodes,
            index=index,
            index_loops=loops,
            gcn_weights=loops_weights(graph, loops),
            edge_pf=index.take(adj.p_f),
            edge_pb=index.take(adj.p_b),
            p_f=adj.p_f,
            p_b=adj.p_b,
            adaptive=adj.adaptive(),
        )

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphContext":
        """Disjoint union of undirected unweighted graphs (the RMSG setting).

        P_f equals P_b there, so only one per-edge scalar is distinct.
        """
        plain = [g.edge_index() for g in graphs]
        index = batch_edges(plain)
        loops = batch_edges([g.edge_index(self_loops=True) for g in graphs])
        weights = np.concatenate([_edge_weights(g, ix) for g, ix in zip(graphs, plain)])
        pf = index.row_normalized(weights)
        return cls(
            n_nodes=index.n_nodes,
            index=index,
            index_loops=loops,
            gcn_weights=gcn_edge_weights(loops),
            edge_pf=pf,
            edge_pb=pf,
        )

    @property
    def dense_gcn(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[self.index_loops.recv, self.index_loops.send] = self.gcn_weights
        return a


def _edge_weights(graph: Graph, index: EdgeIndex) -> np.ndarray:
    return index.take(graph.dense()) if graph.n_edges else np.zeros(index.n_edges)


def loops_weights(graph: Graph, loops: EdgeIndex) -> np.ndarray:
    """GCN coefficients on ``loops`` from the symmetrised, unweighted graph."""
    a = (graph.dense() > 0).astype(float)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return loops.take(gcn_normalize(a))


# ---------------------------------------------------------------------------
# Propagation helpers
# ---------------------------------------------------------------------------


def node_mix(matrix, h: Tensor) -> Tensor:
    """``matrix @ h`` along the node axis for ``h`` of shape ``(N, *rest)``."""
    h = tg.as_tensor(h)
    flat = tg.reshape(h, (h.shape[0], -1))
    return tg.reshape(tg.matmul(matrix, flat), h.shape)


def _expand(per_edge, ndim: int):
    """Reshape per-edge values ``(E,)`` to broadcast against ``(E, *rest)``."""
    shape = (-1,) + (1,) * (ndim - 1)
    if isinstance(per_edge, Tensor):
        return tg.reshape(per_edge, shape)
    return np.asarray(per_edge).reshape(shape)


def edge_propagate(index: EdgeIndex, coeffs, h: Tensor) -> Tensor:
    """out_i = sum over edges (i <- j) of coeff_e * h_j."""
    msgs = tg.gather_rows(h, index.send_sel)
    return tg.segment_sum(msgs * _expand(coeffs, h.ndim), index.recv_sel)


# ---------------------------------------------------------------------------
# GCN
# ---------------------------------------------------------------------------


@dataclass
class GcnParams:
    weight: Tensor

    def named_parameters(self, prefix="gcn"):
        return [(f"{prefix}.weight", self.weight)]


def make_gcn(d_in: int, d_out: int, rng: np.random.Generator) -> GcnParams:
    return GcnParams(init_uniform(rng, d_in, (d_in, d_out)))


def gcn_forward(h, a_hat, p: GcnParams, index: EdgeIndex | None = None) -> Tensor:
    """Â H W. ``a_hat`` is a dense N x N matrix, or per-edge coefficients on ``index``."""
    h = tg.as_tensor(h)
    if h.shape[-1] != p.weight.shape[0]:
        raise tg.ShapeError(f"GCN expects width {p.weight.shape[0]}, got {h.shape[-1]}")
    mixed = node_mix(a_hat, h) if index is None else edge_propagate(index, a_hat, h)
    return tg.matmul(mixed, p.weight)


# ---------------------------------------------------------------------------
# Diffusion convolution
# ---------------------------------------------------------------------------


@dataclass
class DiffusionConvParams:
    hops: int
    weight: Tensor  # (terms * d_in, d_out), terms ordered k-major, then (f, b, adaptive)
    bias: Tensor
    n_matrices: int

    def __post_init__(self):
        if self.hops < 0:
            raise ValueError("hop count K must be non-negative")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0] // ((self.hops + 1) * self.n_matrices)

    def block(self, k: int, family: int) -> np.ndarray:
        """W_{k, family+1} as a (d_in, d_out) view."""
        t = k * self.n_matrices + family
        return self.weight.data[t * self.d_in : (t + 1) * self.d_in]

    def named_parameters(self, prefix="diffusion"):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def make_diffusion(
    d_in: int, d_out: int, hops: int, n_matrices: int, rng: np.random.Generator
) -> DiffusionConvParams:
    terms = (hops + 1) * n_matrices
    return DiffusionConvParams(
        hops,
        init_uniform(rng, terms * d_in, (terms * d_in, d_out)),
        init_uniform(rng, terms * d_in, (d_out,)),
        n_matrices,
    )


def diffusion_conv(h, ctx: GraphContext, p: DiffusionConvParams) -> Tensor:
    """B + sum_k P_f^k h W_k1 + P_b^k h W_k2 + Ã^k h W_k3, with every P^0 = I."""
    h = tg.as_tensor(h)
    mats: list = [ctx.p_f, ctx.p_b]
    if p.n_matrices == 3:
        if ctx.adaptive is None:
            raise ValueError("diffusion layer built for an adaptive matrix, none supplied")
        mats.append(ctx.adaptive)
    if len(mats) != p.n_matrices or any(m is None for m in mats):
        raise ValueError("diffusion layer needs dense transition matrices")
    if h.shape[0] != ctx.n_nodes:
        raise tg.ShapeError(f"features have {h.shape[0]} nodes, graph has {ctx.n_nodes}")
    if h.shape[-1] != p.d_in:
        raise tg.ShapeError(f"diffusion expects width {p.d_in}, got {h.shape[-1]}")
    terms = []
    powers = [h] * len(mats)
    for k in range(p.hops + 1):
        if k:
            powers = [node_mix(m, x) for m, x in zip(mats, powers)]
        terms += powers
    stacked = tg.concat(terms, axis=-1) if len(terms) > 1 else terms[0]
    return tg.matmul(stacked, p.weight) + p.bias


# ---------------------------------------------------------------------------
# GAT
# ---------------------------------------------------------------------------


@dataclass
class GatParams:
    w1: Tensor  # (d, heads * d): per-head value projections side by side
    w2: Tensor  # (d, heads * d_att): per-head attention projections
    w3: Tensor  # (heads, 2 * d_att): [self | neighbour] scoring vectors
    reduce: MlpParams
    heads: int
    slope: float = 0.2

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("GAT needs at least one head")

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def d_att(self) -> int:
        return self.w3.shape[1] // 2

    def parameters(self):
        return [self.w1, self.w2, self.w3] + self.reduce.parameters()

    def named_parameters(self, prefix="gat"):
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.w3", self.w3),
        ] + self.reduce.named_parameters(f"{prefix}.reduce")


def make_gat(
    d: int, heads: int, rng: np.random.Generator, d_att: int | None = None, activation="relu"
) -> GatParams:
    if heads < 1:
        raise ValueError(f"GAT needs at least one head, got {heads}")
    d_att = d_att or d
    return GatParams(
        init_uniform(rng, d, (d, heads * d)),
        init_uniform(rng, d, (d, heads * d_att)),
        init_uniform(rng, 2 * d_att, (heads, 2 * d_att)),
        make_mlp([heads * d, heads * d, d], rng, activation),
        heads,
    )


def gat_attention(h: Tensor, index: EdgeIndex, p: GatParams) -> Tensor:
    """Per-edge, per-head coefficients ``(E, *batch, heads)``; rows sum to 1 per receiver."""
    m, da = p.heads, p.d_att
    z = tg.reshape(tg.matmul(h, p.w2), h.shape[:-1] + (m, da))
    a_self = (z * p.w3[:, :da]).sum(axis=-1)
    a_nb = (z * p.w3[:, da:]).sum(axis=-1)
    logits = tg.gather_rows(a_self, index.recv_sel) + tg.gather_rows(a_nb, index.send_sel)
    return tg.segment_softmax(tg.leaky_relu(logits, p.slope), index.recv_sel)


def gat_forward(h, index_loops: EdgeIndex, p: GatParams, return_attention: bool = False):
    """Multi-head attention over each neighbourhood (self included), ELU, concat, reduce-MLP."""
    h = tg.as_tensor(h)
    if h.shape[-1] != p.d:
        raise tg.ShapeError(f"GAT expects width {p.d}, got {h.shape[-1]}")
    if h.shape[0] != index_loops.n_nodes:
        raise tg.ShapeError(f"features have {h.shape[0]} nodes, graph has {index_loops.n_nodes}")
    alpha = gat_attention(h, index_loops, p)
    values = tg.reshape(tg.matmul(h, p.w1), h.shape[:-1] + (p.heads, p.d))
    msgs = tg.gather_rows(values, index_loops.send_sel) * tg.reshape(alpha, alpha.shape + (1,))
    heads = tg.elu(tg.segment_sum(msgs, index_loops.recv_sel))
    out = mlp_apply(p.reduce, tg.reshape(heads, h.shape[:-1] + (p.heads * p.d,)))
    return (out, alpha) if return_attention else out


# ---------------------------------------------------------------------------
# MPNN
# ---------------------------------------------------------------------------


@dataclass
class MpnnParams:
    mlp1: MlpParams  # aggregate -> output
    mlp2: MlpParams  # [h_i | h_j | scalars] -> message
    n_scalars: int

    def __post_init__(self):
        if self.mlp1.d_in != self.mlp2.d_out:
            raise tg.ShapeError("MLP_1 input width must equal MLP_2 output width")

    @property
    def d(self) -> int:
        return (self.mlp2.d_in - self.n_scalars) // 2

    def parameters(self):
        return self.mlp1.parameters() + self.mlp2.parameters()

    def named_parameters(self, prefix="mpnn"):
        return self.mlp1.named_parameters(f"{prefix}.mlp1") + self.mlp2.named_parameters(
            f"{prefix}.mlp2"
        )


def make_mpnn(
    d: int,
    d_out: int,
    hidden: int,
    n_scalars: int,
    rng: np.random.Generator,
    activation: str = "relu",
    message_width: int | None = None,
) -> MpnnParams:
    msg = message_width or hidden
    return MpnnParams(
        make_mlp([msg, hidden, d_out], rng, activation),
        make_mlp([2 * d + n_scalars, hidden, msg], rng, activation),
        n_scalars,
    )


def mpnn_forward(h, index: EdgeIndex, scalars: Sequence, p: MpnnParams) -> Tensor:
    """MLP_1(sum over j in N(i) of MLP_2(h_i | h_j | s_ij...)); no self-loop.

    MLP_2's first affine map is applied block-wise: the h_i and h_j blocks are
    projected once per node and then gathered per edge, which equals projecting
    the concatenated per-edge input.
    """
    h = tg.as_tensor(h)
    if len(scalars) != p.n_scalars:
        raise ValueError(f"MPNN built for {p.n_scalars} edge scalars, got {len(scalars)}")
    d = p.d
    if h.shape[-1] != d:
        raise tg.ShapeError(f"MPNN expects width {d}, got {h.shape[-1]}")
    if h.shape[0] != index.n_nodes:
        raise tg.ShapeError(f"features have {h.shape[0]} nodes, graph has {index.n_nodes}")
    w, b = p.mlp2.layers[0]
    own = tg.gather_rows(tg.linear(h, w[:d], b), index.recv_sel)
    other = tg.gather_rows(tg.matmul(h, w[d : 2 * d]), index.send_sel)
    pre = own + other
    if p.n_scalars:
        cols = [tg.reshape(tg.as_tensor(s), (index.n_edges, 1)) for s in scalars]
        s_mat = tg.concat(cols, axis=1) if len(cols) > 1 else cols[0]
        proj = tg.matmul(s_mat, w[2 * d :])
        pre = pre + tg.reshape(proj, (index.n_edges,) + (1,) * (h.ndim - 2) + (w.shape[1],))
    msgs = mlp_tail(p.mlp2, pre)
    message_counter.count += index.n_edges
    return mlp_apply(p.mlp1, tg.segment_sum(msgs, index.recv_sel))


def mlp_tail(p: MlpParams, pre: Tensor) -> Tensor:
    """Finish an MLP given the pre-activation of its first layer."""
    h = pre
    for i, (w, b) in enumerate(p.layers):
        if i:
            h = tg.linear(h, w, b)
        if i < len(p.activations):
            h = tg.activation(p.activations[i])(h)
    return h


# ---------------------------------------------------------------------------
# Pluggable layer wrappers
# ---------------------------------------------------------------------------


@dataclass
class SpatialLayer:
    """A flavor's parameters behind one call signature ``layer(h, ctx)``."""

    flavor: str
    params: object
    scalars: tuple[str, ...] = field(default=())

    def __call__(self, h, ctx: GraphContext) -> Tensor:
        if self.flavor == "gcn":
            return gcn_forward(h, ctx.gcn_weights, self.params, ctx.index_loops)
        if self.flavor == "diffusion":
            return diffusion_conv(h, ctx, self.params)
        if self.flavor == "gat":
            return gat_forward(h, ctx.index_loops, self.params)
        if self.flavor == "mpnn":
            return mpnn_forward(h, ctx.index, [_scalar(ctx, s) for s in self.scalars], self.params)
        raise ValueError(f"unknown flavor {self.flavor!r}")

    def named_parameters(self, prefix: str):
        return self.params.named_parameters(prefix)


def _scalar(ctx: GraphContext, name: str):
    if name == "pf":
        return ctx.edge_pf
    if name == "pb":
        return ctx.edge_pb
    if name == "adaptive":
        if ctx.adaptive is None:
            raise ValueError("MPNN configured with adaptive scalars but no adaptive matrix")
        return ctx.index.take_tensor(ctx.adaptive)
    raise ValueError(f"unknown edge scalar {name!r}")


def make_spatial(
    flavor: str,
    d: int,
    rng: np.random.Generator,
    *,
    hops: int = 2,
    heads: int = 4,
    hidden: int | None = None,
    n_matrices: int = 2,
    scalars: Sequence[str] = ("pf",),
    activation: str = "relu",
) -> SpatialLayer:
    """Width-preserving spatial layer of the given flavor."""
    hidden = hidden or d
    if flavor == "gcn":
        return SpatialLayer("gcn", make_gcn(d, d, rng))
    if flavor == "diffusion":
        return SpatialLayer("diffusion", make_diffusion(d, d, hops, n_matrices, rng))
    if flavor == "gat":
        return SpatialLayer("gat", make_gat(d, heads, rng, activation=activation))
    if flavor == "mpnn":
        return SpatialLayer(
            "mpnn", make_mpnn(d, d, hidden, len(scalars), rng, activation), tuple(scalars)
        )
    raise ValueError(f"unknown flavor {flavor!r}; expected one of {FLAVORS}")
