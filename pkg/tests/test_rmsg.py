import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnflavors import tensorgrad as tg
from gnnflavors.graphs import Graph, gen_er_graph, rng_for
from gnnflavors.layers import GraphContext
from gnnflavors.rmsg import (
    TEST,
    TRAIN,
    VAL,
    AverageModel,
    RmsgConfig,
    RmsgModel,
    RmsgRunReport,
    RmsgSet,
    RunRow,
    average_model,
    eval_metrics,
    evaluate_average,
    make_rmsg_dataset,
    make_sample,
    n_params_mlp,
    residual_analysis,
    rmsg_labels,
    size_sweep,
    train_rmsg,
)


def brute_force_labels(graph: Graph, x):
    a = graph.dense() > 0
    n = graph.n_nodes
    y = np.zeros(n)
    for i in range(n):
        terms = [(x[i] * x[j]) ** 2 for j in range(n) if a[i, j]]
        if terms:
            y[i] = np.sqrt(sum(terms) / len(terms))
    return y


TINY = dict(n_train=64, n_val=16, n_test=16, width=4, hidden=4, mpnn_hidden=4, heads=2, batch_graphs=4)


# -- labels -----------------------------------------------------------------


def test_labels_zero_features():
    g = gen_er_graph(10, 0.5, 0)
    np.testing.assert_array_equal(rmsg_labels(g, np.zeros(10)), 0.0)


def test_labels_single_edge():
    np.testing.assert_array_equal(rmsg_labels(Graph.from_edges(2, [[0, 1, 1]]), [1.0, 1.0]), [1.0, 1.0])


def test_labels_path():
    g = Graph.from_edges(3, [[0, 1, 1], [1, 2, 1]])
    np.testing.assert_allclose(rmsg_labels(g, [1.0, 2.0, -1.0]), [2.0, 2.0, 2.0])


def test_labels_isolated_node_is_zero():
    g = Graph.from_edges(3, [[0, 1, 1]])
    assert rmsg_labels(g, [1.0, 2.0, 5.0])[2] == 0.0


def test_labels_need_one_feature_per_node():
    with pytest.raises(tg.ShapeError):
        rmsg_labels(Graph.from_edges(3, []), [1.0, 2.0])


def test_labels_match_pair_enumeration_on_1000_graphs():
    worst = 0.0
    for k in range(1000):
        rng = rng_for(0, 77, k)
        n = int(rng.integers(1, 25))
        g = gen_er_graph(n, float(rng.uniform(0, 0.6)), rng)
        x = rng.uniform(-2, 2, n)
        worst = max(worst, float(np.max(np.abs(rmsg_labels(g, x) - brute_force_labels(g, x)))))
    assert worst <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_labels_ignore_feature_sign(seed):
    s = make_sample(seed, 0)
    np.testing.assert_array_equal(rmsg_labels(s.graph, -s.x), s.y)


# -- data -------------------------------------------------------------------


def test_samples_are_reproducible_and_independent():
    a, b = make_sample(3, 5), make_sample(3, 5)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.graph.dense(), b.graph.dense())
    assert not np.array_equal(a.x, make_sample(3, 6).x)
    assert not np.array_equal(a.x, make_sample(3, 5, stream=TEST).x)


def test_sample_invariants():
    for s in make_rmsg_dataset(20, 1):
        assert s.graph.n_nodes == 100 and not s.graph.directed
        assert (np.abs(s.x) <= 2).all() and (s.y >= 0).all()
        np.testing.assert_allclose(s.y, brute_force_labels(s.graph, s.x), atol=1e-12)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        next(make_rmsg_dataset(0, 0))
    with pytest.raises(ValueError):
        RmsgSet.generate(0, 0, TRAIN)


def test_block_generation_matches_single_samples():
    block = RmsgSet.generate(6, 4, VAL)
    for k in range(6):
        ref = make_sample(4, k, stream=VAL)
        s = block.sample(k)
        np.testing.assert_array_equal(s.x, ref.x)
        np.testing.assert_allclose(s.y, ref.y, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(s.graph.dense(), ref.graph.dense())


def test_feature_mean_over_a_million_draws():
    x = RmsgSet.generate(10_000, 0, TRAIN).x
    assert x.size == 10**6
    assert abs(x.mean()) <= 4 * (4 / np.sqrt(12)) / 1e3


def test_batch_is_disjoint_union():
    data = RmsgSet.generate(3, 0, TRAIN)
    model = RmsgModel(RmsgConfig(**TINY), 0)
    x, y, ctx = data.batch([2, 0])
    out = model(x, ctx).data.reshape(2, -1)
    for pos, k in enumerate([2, 0]):
        s = data.sample(k)
        single = model(s.x[:, None], GraphContext.from_graphs([s.graph])).data[:, 0]
        np.testing.assert_allclose(out[pos], single, atol=1e-12)
        np.testing.assert_array_equal(y.reshape(2, -1)[pos], s.y)


# -- average model and metrics ----------------------------------------------


def test_average_model_example():
    np.testing.assert_array_equal(average_model([[1.0, 2.0, 3.0]]).predict(4), [2.0] * 4)
    assert AverageModel.fit([[1.0], [2.0, 3.0]]).value == 2.0


def test_average_model_empty_stream():
    with pytest.raises(tg.ContractError):
        average_model([])


def test_average_model_on_fresh_data():
    m = evaluate_average(RmsgSet.generate(4096, 0, TRAIN), RmsgSet.generate(4096, 0, TEST))
    assert -0.01 <= m["r2"] <= 0.01
    assert 0.67 <= m["rmse"] <= 0.72


def test_metrics_perfect():
    assert eval_metrics([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == {"rmse": 0.0, "mae": 0.0, "r2": 1.0}


def test_metrics_mean_predictor_scores_zero():
    y = np.array([0.5, 1.5, 2.0, 4.0])
    assert eval_metrics(y, np.full(4, y.mean()))["r2"] == 0.0


def test_metrics_hand_example():
    m = eval_metrics([0.0, 1.0], [0.0, 0.0])
    assert m["rmse"] == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert m["mae"] == 0.5 and m["r2"] == -1.0


@pytest.mark.parametrize("y, h", [([1.0, 2.0], [1.0]), ([1.0], [1.0]), ([2.0, 2.0], [1.0, 3.0])])
def test_metrics_errors(y, h):
    with pytest.raises((ValueError, tg.ShapeError)):
        eval_metrics(y, h)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=30))
def test_metric_sanity(pairs):
    y, h = map(np.array, zip(*pairs))
    if np.ptp(y) < 1e-6:
        return
    m = eval_metrics(y, h)
    assert m["r2"] <= 1.0 + 1e-12
    assert m["rmse"] >= abs(np.mean(y - h)) - 1e-12
    assert m["rmse"] >= m["mae"] - 1e-12


# -- residuals --------------------------------------------------------------


def test_residuals_zero_for_perfect_predictions():
    y = np.linspace(0, 3, 40)
    r = residual_analysis(y, y)
    assert (r.residuals == 0).all()
    assert np.nanmax(np.abs(r.label_mean_residual)) == 0


def test_residuals_constant_shift():
    y = np.linspace(0, 3, 40)
    r = residual_analysis(y, y - 0.3)
    np.testing.assert_allclose(r.residuals, 0.3)
    np.testing.assert_allclose(r.label_mean_residual[r.label_counts > 0], 0.3)


def test_residuals_two_bin_example():
    r = residual_analysis([0, 1, 2, 3], [1, 1, 2, 2], bins=2)
    np.testing.assert_allclose(r.label_mean_residual, [-0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=2, max_size=200), st.integers(0, 100))
def test_residual_histogram_counts_everything(y, seed):
    y = np.array(y)
    h = y + np.random.default_rng(seed).normal(size=y.size)
    r = residual_analysis(y, h)
    assert r.hist_counts.sum() == y.size == r.label_counts.sum() == r.label_hist.sum() == r.pred_hist.sum()
    assert r.hist_counts.size == 50 and r.label_counts.size == 20


def test_residual_errors():
    with pytest.raises(tg.ShapeError):
        residual_analysis([1, 2], [1])
    with pytest.raises(ValueError):
        residual_analysis([1, 2], [1, 2], bins=1)


def test_residual_csvs(tmp_path):
    r = residual_analysis(np.linspace(0, 1, 30), np.linspace(0, 1, 30) ** 2)
    r.write_csv(tmp_path)
    with open(tmp_path / "residual_curve.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 20
    assert {p.name for p in tmp_path.iterdir()} == {"residual_curve.csv", "residual_hist.csv", "distributions.csv"}


# -- models and training ----------------------------------------------------


def test_mlp_parameter_count():
    for h in (1, 4, 17):
        assert n_params_mlp([1, h, 1]) == 3 * h + 1


@pytest.mark.parametrize("flavor", ["gcn", "gat", "mpnn"])
def test_model_parameter_count_matches_widths(flavor):
    c = RmsgConfig(flavor=flavor, width=5, hidden=3, mpnn_hidden=6, heads=2)
    expect = n_params_mlp([1, 3, 5]) + n_params_mlp([5, 3, 1])
    if flavor == "gcn":
        expect += 5 * 5
    elif flavor == "gat":
        expect += 5 * 10 + 5 * 10 + 2 * 10 + n_params_mlp([10, 10, 5])
    else:
        expect += n_params_mlp([11, 6, 6]) + n_params_mlp([6, 6, 5])
    assert RmsgModel(c, 0).n_parameters() == expect


def test_unknown_rmsg_flavor():
    with pytest.raises(ValueError):
        RmsgConfig(flavor="diffusion")


def test_paper_scale_sizes():
    c = RmsgConfig.paper_scale()
    assert (c.n_train, c.n_val, c.n_test) == (2**20, 104_857, 2**20)


@pytest.mark.parametrize("flavor", ["gcn", "gat", "mpnn"])
def test_training_is_bit_identical(flavor):
    c = RmsgConfig(flavor=flavor, **TINY)
    a, b = train_rmsg(c, 3), train_rmsg(c, 3)
    for field in ("rmse", "mae", "r2", "val_rmse"):
        assert getattr(a.row, field) == getattr(b.row, field)
    np.testing.assert_array_equal(a.test_pred, b.test_pred)
    assert a.row.status == "ok" and np.isfinite(a.row.r2)


def test_training_reduces_loss():
    c = RmsgConfig(flavor="mpnn", **{**TINY, "n_train": 256, "epochs": 3})
    res = train_rmsg(c, 0)
    assert res.history[-1] < res.history[0]


def test_non_finite_loss_marks_run_failed():
    c = RmsgConfig(flavor="mpnn", **TINY)
    data = {"train": RmsgSet.generate(64, 0, TRAIN), "val": RmsgSet.generate(16, 0, VAL), "test": RmsgSet.generate(16, 0, TEST)}
    data["train"].y[:] = np.inf
    res = train_rmsg(c, 0, data=data)
    assert res.row.status.startswith("failed")
    report = RmsgRunReport("mpnn", [res.row, train_rmsg(c, 1).row])
    assert report.aggregate()["failed"] == 1


def test_save_load(tmp_path):
    res = train_rmsg(RmsgConfig(flavor="gat", **TINY), 0)
    res.model.save(tmp_path)
    back = RmsgModel.load(tmp_path)
    data = RmsgSet.generate(2, 9, TEST)
    x, _, ctx = data.batch([0, 1])
    np.testing.assert_array_equal(res.model(x, ctx).data, back(x, ctx).data)


def test_report_uses_sample_std_over_runs(tmp_path):
    rows = [RunRow(s, "mpnn", 10, rmse=1.0, mae=1.0, r2=r) for s, r in enumerate([0.9, 0.95, 1.0, 0.92, 0.93])]
    report = RmsgRunReport("mpnn", rows)
    agg = report.aggregate()
    assert agg["r2"]["std"] == pytest.approx(np.std([0.9, 0.95, 1.0, 0.92, 0.93], ddof=1))
    report.write(tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["runs"] == 5
    with open(tmp_path / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_size_sweep_rows():
    base = RmsgConfig(flavor="gcn", **TINY)
    rows = size_sweep("gcn", [2, 3], [0], base)
    assert [r["size"] for r in rows] == [2, 3]
    assert rows[0]["n_params"] == n_params_mlp([1, 2, 2]) + 4 + n_params_mlp([2, 2, 1])



@pytest.mark.parametrize("flavor", ["gcn", "gat", "mpnn"])
def test_untrained_model_predicts_zero(flavor):
    data = RmsgSet.generate(2, 0, TRAIN)
    x, _, ctx = data.batch([0, 1])
    model = RmsgModel(RmsgConfig(flavor=flavor, width=4, hidden=4, mpnn_hidden=4, heads=2), 0)
    np.testing.assert_array_equal(model(x, ctx).data, 0.0)
    tg.current_tape().reset()
