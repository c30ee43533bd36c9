import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnflavors import tensorgrad as tg
from gnnflavors.graphs import AdjacencySet, Graph, gcn_normalize, gen_er_graph, normalize_forward
from gnnflavors.layers import (
    DiffusionConvParams,
    GatParams,
    GcnParams,
    GraphContext,
    MpnnParams,
    diffusion_conv,
    gat_forward,
    gcn_forward,
    make_gat,
    make_mpnn,
    make_spatial,
    message_counter,
    mpnn_forward,
)
from gnnflavors.tensorgrad import MlpParams, Tensor


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def identity_mlp(d, depth=2):
    layers = [(T(np.eye(d)), T(np.zeros(d))) for _ in range(depth)]
    return MlpParams(layers, ["relu"] * (depth - 1))


def np_mlp(p: MlpParams, x):
    acts = {"relu": lambda v: np.maximum(v, 0), "tanh": np.tanh}
    for i, (w, b) in enumerate(p.layers):
        x = x @ w.data + b.data
        if i < len(p.activations):
            x = acts[p.activations[i]](x)
    return x


def random_undirected(rng, n, p=0.4):
    return gen_er_graph(n, p, rng)


# -- GCN --------------------------------------------------------------------


def test_gcn_isolated_node_identity():
    h = np.array([[1.5, -2.0]])
    ctx = GraphContext.from_graphs([Graph.from_edges(1, [])])
    out = gcn_forward(h, ctx.gcn_weights, GcnParams(T(np.eye(2))), ctx.index_loops)
    np.testing.assert_allclose(out.data, h)


def test_gcn_two_node_example():
    a_hat = gcn_normalize(np.array([[0, 1], [1, 0]]))
    np.testing.assert_allclose(a_hat, [[0.5, 0.5], [0.5, 0.5]])
    out = gcn_forward(np.array([[1.0], [3.0]]), a_hat, GcnParams(T([[1.0]])))
    np.testing.assert_allclose(out.data, [[2.0], [2.0]])


def test_gcn_components_independent():
    g = Graph.from_edges(4, [[0, 1, 1], [2, 3, 1]])
    ctx = GraphContext.from_graphs([g])
    p = GcnParams(T(np.random.default_rng(0).normal(size=(2, 2))))
    h = np.random.default_rng(1).normal(size=(4, 2))
    h2 = h.copy()
    h2[2:] = 99.0
    a = gcn_forward(h, ctx.gcn_weights, p, ctx.index_loops).data
    b = gcn_forward(h2, ctx.gcn_weights, p, ctx.index_loops).data
    np.testing.assert_array_equal(a[:2], b[:2])


@pytest.mark.parametrize("seed", range(5))
def test_gcn_edge_form_matches_dense(seed):
    rng = np.random.default_rng(seed)
    g = random_undirected(rng, 7)
    ctx = GraphContext.from_graphs([g])
    p = GcnParams(T(rng.normal(size=(3, 2))))
    h = rng.normal(size=(7, 3))
    dense = gcn_normalize((g.dense() > 0).astype(float)) @ h @ p.weight.data
    np.testing.assert_allclose(gcn_forward(h, ctx.gcn_weights, p, ctx.index_loops).data, dense, atol=1e-12)


# -- diffusion --------------------------------------------------------------


def adaptive_ctx(a, width=2, seed=0):
    return GraphContext.from_adjacency(AdjacencySet.from_adjacency(a, adaptive_width=width, rng=np.random.default_rng(seed)))


def test_diffusion_k0_identity_weights_triples_input():
    h = np.array([[1.0, 2.0], [3.0, -1.0]])
    p = DiffusionConvParams(0, T(np.vstack([np.eye(2)] * 3)), T(np.zeros(2)), 3)
    out = diffusion_conv(h, adaptive_ctx(np.array([[0, 1], [1, 0]])), p)
    np.testing.assert_allclose(out.data, 3 * h)


def test_diffusion_zero_weights_give_bias():
    p = DiffusionConvParams(2, T(np.zeros((9 * 2, 3))), T([1.0, -2.0, 0.5]), 3)
    out = diffusion_conv(np.ones((2, 2)), adaptive_ctx(np.array([[0, 1], [0, 0]])), p)
    np.testing.assert_allclose(out.data, np.tile([1.0, -2.0, 0.5], (2, 1)))


def test_diffusion_directed_two_node_example():
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    w = np.zeros((6, 1))
    w[3, 0] = 1.0  # k = 1, forward family
    p = DiffusionConvParams(1, T(w), T([0.0]), 3)
    ctx = adaptive_ctx(a)
    np.testing.assert_array_equal(ctx.p_f, a)
    np.testing.assert_allclose(diffusion_conv(np.array([[1.0], [2.0]]), ctx, p).data, [[2.0], [0.0]])


@pytest.mark.parametrize("hops", [0, 1, 2, 3])
def test_diffusion_matches_matrix_power_oracle(hops):
    rng = np.random.default_rng(hops)
    a = rng.uniform(size=(5, 5)) * (rng.random((5, 5)) < 0.5)
    ctx = adaptive_ctx(a, seed=hops)
    d_in, d_out = 3, 2
    p = DiffusionConvParams(hops, T(rng.normal(size=((hops + 1) * 3 * d_in, d_out))), T(rng.normal(size=d_out)), 3)
    h = rng.normal(size=(5, d_in))
    mats = [normalize_forward(a), normalize_forward(a.T), ctx.adaptive.data]
    expect = p.bias.data.copy()
    for k in range(hops + 1):
        for f, m in enumerate(mats):
            expect = expect + np.linalg.matrix_power(m, k) @ h @ p.block(k, f)
    np.testing.assert_allclose(diffusion_conv(h, ctx, p).data, expect, atol=1e-12)


def test_diffusion_rejects_negative_hops():
    with pytest.raises(ValueError):
        DiffusionConvParams(-1, T(np.zeros((3, 1))), T([0.0]), 3)


# -- GAT --------------------------------------------------------------------


def gat_oracle(h, g: Graph, p: GatParams):
    n, d = h.shape
    m, da = p.heads, p.d_att
    z = (h @ p.w2.data).reshape(n, m, da)
    v = (h @ p.w1.data).reshape(n, m, d)
    heads = np.zeros((n, m, d))
    for i in range(n):
        nb = [i] + list(g.neighbors(i))
        for k in range(m):
            e = np.array([z[i, k] @ p.w3.data[k, :da] + z[j, k] @ p.w3.data[k, da:] for j in nb])
            e = np.where(e > 0, e, p.slope * e)
            alpha = np.exp(e - e.max())
            alpha /= alpha.sum()
            s = sum(a * v[j, k] for a, j in zip(alpha, nb))
            heads[i, k] = np.where(s > 0, s, np.expm1(s))
    return np_mlp(p.reduce, heads.reshape(n, m * d))


def test_gat_isolated_node_returns_input():
    g = Graph.from_edges(1, [])
    p = GatParams(T([[1.0, 0], [0, 1]]), T(np.ones((2, 2))), T(np.ones((1, 4))), identity_mlp(2), 1)
    h = np.array([[0.3, 2.0]])
    out = gat_forward(h, g.edge_index(self_loops=True), p)
    np.testing.assert_allclose(out.data, h)


def test_gat_equal_features_give_uniform_attention():
    g = Graph.from_edges(4, [[0, 1, 1], [0, 2, 1], [0, 3, 1]])
    p = make_gat(3, 2, np.random.default_rng(0))
    _, alpha = gat_forward(np.ones((4, 3)), g.edge_index(self_loops=True), p, return_attention=True)
    ix = g.edge_index(self_loops=True)
    np.testing.assert_allclose(alpha.data[ix.recv == 0], 0.25, atol=1e-15)


def test_gat_two_node_hand_example():
    g = Graph.from_edges(2, [[0, 1, 1]])
    p = GatParams(T([[1.0]]), T([[1.0]]), T([[1.0, 1.0]]), identity_mlp(1), 1, slope=0.2)
    ix = g.edge_index(self_loops=True)
    out, alpha = gat_forward(np.array([[1.0], [2.0]]), ix, p, return_attention=True)
    node0 = {int(s): a for r, s, a in zip(ix.recv, ix.send, alpha.data[:, 0]) if r == 0}
    expect = np.exp([2.0, 3.0]) / np.exp([2.0, 3.0]).sum()
    assert node0[0] == pytest.approx(expect[0], abs=1e-12) and node0[1] == pytest.approx(expect[1], abs=1e-12)
    assert out.data[0, 0] == pytest.approx(1.7311, abs=1e-4)


@pytest.mark.parametrize("seed", range(6))
def test_gat_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_undirected(rng, 6)
    p = make_gat(3, 1 + seed % 4, rng)
    h = rng.normal(size=(6, 3))
    out = gat_forward(h, g.edge_index(self_loops=True), p).data
    np.testing.assert_allclose(out, gat_oracle(h, g, p), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_gat_attention_rows_sum_to_one(seed, heads):
    rng = np.random.default_rng(seed)
    g = random_undirected(rng, 7)
    ix = g.edge_index(self_loops=True)
    _, alpha = gat_forward(rng.normal(size=(7, 2)), ix, make_gat(2, heads, rng), return_attention=True)
    for k in range(heads):
        np.testing.assert_allclose(np.bincount(ix.recv, weights=alpha.data[:, k], minlength=7), 1.0, atol=1e-12)


def test_gat_requires_a_head():
    with pytest.raises(ValueError):
        make_gat(2, 0, np.random.default_rng(0))


# -- MPNN -------------------------------------------------------------------


def mpnn_oracle(h, g: Graph, scalars: list[np.ndarray], p: MpnnParams):
    n = h.shape[0]
    agg = np.zeros((n, p.mlp2.d_out))
    for i in range(n):
        for j in g.neighbors(i):
            s = [m[i, j] for m in scalars]
            agg[i] += np_mlp(p.mlp2, np.concatenate([h[i], h[j], s]))
    return np_mlp(p.mlp1, agg)


def test_mpnn_two_node_hand_example():
    g = Graph.from_edges(2, [[0, 1, 1]])
    mlp2 = MlpParams([(T([[1.0], [2.0], [0.0]]), T([0.0]))], [])
    mlp1 = MlpParams([(T([[1.0]]), T([0.0]))], [])
    ctx = GraphContext.from_graphs([g])
    out = mpnn_forward(np.array([[1.0], [3.0]]), ctx.index, [ctx.edge_pf], MpnnParams(mlp1, mlp2, 1))
    np.testing.assert_allclose(out.data, [[7.0], [5.0]])


def test_mpnn_zero_messages_give_constant_output():
    rng = np.random.default_rng(0)
    p = make_mpnn(2, 3, 4, 1, rng)
    w, b = p.mlp2.layers[-1]
    w.data[:] = 0
    b.data[:] = 0
    g = random_undirected(rng, 6, 0.5)
    ctx = GraphContext.from_graphs([g])
    out = mpnn_forward(rng.normal(size=(6, 2)), ctx.index, [ctx.edge_pf], p).data
    expect = np_mlp(p.mlp1, np.zeros(4))
    np.testing.assert_allclose(out, np.tile(expect, (6, 1)), atol=1e-15)


def test_mpnn_isolated_node_gets_mlp1_of_zero():
    rng = np.random.default_rng(1)
    p = make_mpnn(2, 2, 3, 1, rng)
    g = Graph.from_edges(3, [[0, 1, 1]])
    ctx = GraphContext.from_graphs([g])
    out = mpnn_forward(rng.normal(size=(3, 2)), ctx.index, [ctx.edge_pf], p).data
    np.testing.assert_allclose(out[2], np_mlp(p.mlp1, np.zeros(3)))


@pytest.mark.parametrize("seed", range(5))
def test_mpnn_matches_pair_enumeration(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(6, 6)) * (rng.random((6, 6)) < 0.4)
    np.fill_diagonal(a, 0)
    adj = AdjacencySet.from_adjacency(a, adaptive_width=2, rng=rng)
    ctx = GraphContext.from_adjacency(adj)
    p = make_mpnn(3, 2, 5, 3, rng)
    h = rng.normal(size=(6, 3))
    out = mpnn_forward(h, ctx.index, [ctx.edge_pf, ctx.edge_pb, ctx.index.take_tensor(ctx.adaptive)], p).data
    g = Graph.from_dense(a)
    expect = mpnn_oracle(h, g, [adj.p_f, adj.p_b, adj.adaptive().data], p)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_mpnn_message_count_is_sum_of_degrees():
    rng = np.random.default_rng(3)
    g = random_undirected(rng, 20, 0.2)
    layer = make_spatial("mpnn", 2, rng)
    message_counter.reset()
    layer(rng.normal(size=(20, 2)), GraphContext.from_graphs([g]))
    assert message_counter.count == sum(len(g.neighbors(i)) for i in range(20)) == 2 * g.n_edges


def test_mpnn_input_width_for_rmsg():
    p = make_mpnn(4, 4, 8, 1, np.random.default_rng(0))
    assert p.mlp2.d_in == 2 * 4 + 1
    p3 = make_mpnn(4, 4, 8, 3, np.random.default_rng(0))
    assert p3.mlp2.d_in == 2 * 4 + 3


def test_mpnn_scalar_count_checked():
    rng = np.random.default_rng(0)
    ctx = GraphContext.from_graphs([random_undirected(rng, 4)])
    with pytest.raises(ValueError):
        mpnn_forward(np.zeros((4, 2)), ctx.index, [], make_mpnn(2, 2, 3, 1, rng))


# -- properties shared by every flavor --------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["gcn", "gat", "mpnn"]))
def test_one_layer_locality(seed, flavor):
    rng = np.random.default_rng(seed)
    n = 8
    g = random_undirected(rng, n, 0.25)
    ctx = GraphContext.from_graphs([g])
    layer = make_spatial(flavor, 3, rng, heads=2)
    h = rng.normal(size=(n, 3))
    i = int(rng.integers(n))
    keep = set(g.neighbors(i).tolist()) | {i}
    h2 = h.copy()
    for j in range(n):
        if j not in keep:
            h2[j] = rng.normal(size=3) * 10
    np.testing.assert_allclose(layer(h, ctx).data[i], layer(h2, ctx).data[i], atol=1e-12)


@pytest.mark.parametrize("flavor", ["gcn", "diffusion", "gat", "mpnn"])
def test_layers_accept_batch_axes(flavor):
    rng = np.random.default_rng(0)
    a = (rng.random((5, 5)) < 0.5).astype(float)
    np.fill_diagonal(a, 0)
    ctx = adaptive_ctx(a)
    layer = make_spatial(flavor, 3, rng, n_matrices=3, scalars=("pf", "pb", "adaptive"))
    h = rng.normal(size=(5, 2, 4, 3))
    out = layer(h, ctx).data
    assert out.shape == (5, 2, 4, 3)
    np.testing.assert_allclose(out[:, 1, 2], layer(h[:, 1, 2], ctx).data, atol=1e-12)


@pytest.mark.parametrize("flavor", ["gcn", "diffusion", "gat", "mpnn"])
def test_shape_errors(flavor):
    rng = np.random.default_rng(0)
    ctx = adaptive_ctx(np.array([[0, 1.0], [1.0, 0]]))
    layer = make_spatial(flavor, 3, rng, n_matrices=3, scalars=("pf", "pb", "adaptive"))
    with pytest.raises(tg.ShapeError):
        layer(np.zeros((2, 4)), ctx)


def test_unknown_flavor():
    with pytest.raises(ValueError):
        make_spatial("gin", 2, np.random.default_rng(0))
