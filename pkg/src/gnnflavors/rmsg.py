"""RMSG: node regression where each label is the root mean square of x_i * x_j over neighbours.

Every sample is a fresh G(100, 0.1) graph with features drawn from U[-2, 2].
Sample ``k`` of stream ``s`` is generated from a PCG64 stream keyed by
``(seed, s, k)``, so any sample can be rebuilt on its own.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from . import tensorgrad as tg
from .graphs import EdgeIndex, Graph, gen_er_graph, rng_for
from .layers import GraphContext, SpatialLayer, make_spatial
from .tensorgrad import Tensor, make_mlp, mlp_apply

log = logging.getLogger(__name__)

N_NODES = 100
EDGE_PROB = 0.1
FEATURE_RANGE = (-2.0, 2.0)
PAPER_SCALE = {"n_train": 2**20, "n_val": 104_857, "n_test": 2**20}
DESK_SCALE = {"n_train": 2**16, "n_val": 2**13, "n_test": 2**16}
TRAIN, VAL, TEST = 0, 1, 2
RMSG_FLAVORS = ("gcn", "gat", "mpnn")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def rmsg_labels(graph: Graph, x) -> np.ndarray:
    """y_i = sqrt(mean over neighbours j of (x_i x_j)^2); 0 for isolated nodes."""
    x = np.asarray(x, dtype=float)
    if x.shape != (graph.n_nodes,):
        raise tg.ShapeError(f"need one feature per node, got {x.shape}")
    ix = graph.edge_index()
    return _labels(x, ix.recv, ix.send, graph.n_nodes)


def _labels(x, recv, send, n) -> np.ndarray:
    deg = np.bincount(recv, minlength=n)
    sq = np.bincount(recv, weights=(x[recv] * x[send]) ** 2, minlength=n)
    return np.sqrt(np.divide(sq, deg, out=np.zeros(n), where=deg > 0))


@dataclass
class RmsgSample:
    graph: Graph
    x: np.ndarray
    y: np.ndarray


def make_sample(seed: int, k: int, stream: int = TRAIN, n_nodes: int = N_NODES, p: float = EDGE_PROB) -> RmsgSample:
    rng = rng_for(seed, stream, k)
    graph = gen_er_graph(n_nodes, p, rng)
    x = rng.uniform(*FEATURE_RANGE, size=n_nodes)
    return RmsgSample(graph, x, rmsg_labels(graph, x))


def make_rmsg_dataset(count: int, seed: int, stream: int = TRAIN, **kw) -> Iterator[RmsgSample]:
    if count < 1:
        raise ValueError("count must be at least 1")
    for k in range(count):
        yield make_sample(seed, k, stream, **kw)


class RmsgSet:
    """A block of samples held as flat arrays (edges stored once per undirected pair)."""

    def __init__(self, x: np.ndarray, y: np.ndarray, src: np.ndarray, dst: np.ndarray, offsets: np.ndarray):
        self.x, self.y = x, y
        self.src, self.dst = src, dst
        self.offsets = offsets

    @classmethod
    def generate(cls, count: int, seed: int, stream: int, n_nodes: int = N_NODES, p: float = EDGE_PROB) -> "RmsgSet":
        if count < 1:
            raise ValueError("count must be at least 1")
        xs = np.empty((count, n_nodes))
        ys = np.empty((count, n_nodes))
        src, dst, sizes = [], [], np.empty(count, dtype=np.int64)
        iu, ju = np.triu_indices(n_nodes, 1)
        dt = np.uint8 if n_nodes <= 256 else np.int32
        for k in range(count):
            # Same draw order as make_sample / gen_er_graph.
            rng = rng_for(seed, stream, k)
            keep = rng.random(iu.size) < p
            x = rng.uniform(*FEATURE_RANGE, size=n_nodes)
            a, b = iu[keep], ju[keep]
            recv = np.concatenate([a, b])
            send = np.concatenate([b, a])
            xs[k] = x
            ys[k] = _labels(x, recv, send, n_nodes)
            src.append(a.astype(dt))
            dst.append(b.astype(dt))
            sizes[k] = a.size
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return cls(xs, ys, np.concatenate(src), np.concatenate(dst), offsets)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[1]

    def sample(self, k: int) -> RmsgSample:
        a = self.src[self.offsets[k] : self.offsets[k + 1]]
        b = self.dst[self.offsets[k] : self.offsets[k + 1]]
        g = Graph(self.n_nodes, a, b, np.ones(a.size))
        return RmsgSample(g, self.x[k], self.y[k])

    def batch(self, ks: Sequence[int]) -> tuple[np.ndarray, np.ndarray, GraphContext]:
        """Features ``(B*N, 1)``, labels ``(B*N, 1)`` and the disjoint-union context."""
        ks = np.asarray(ks)
        n = self.n_nodes
        parts_a, parts_b = [], []
        for pos, k in enumerate(ks):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            off = pos * n
            parts_a.append(self.src[lo:hi].astype(np.int64) + off)
            parts_b.append(self.dst[lo:hi].astype(np.int64) + off)
        a = np.concatenate(parts_a)
        b = np.concatenate(parts_b)
        total = ks.size * n
        recv = np.concatenate([a, b])
        send = np.concatenate([b, a])
        index = EdgeIndex(total, recv, send)
        deg = np.bincount(recv, minlength=total).astype(float)
        loop = np.arange(total)
        loops = EdgeIndex(total, np.concatenate([recv, loop]), np.concatenate([send, loop]))
        dl = deg + 1.0
        gcn_w = 1.0 / np.sqrt(dl[loops.recv] * dl[loops.send])
        pf = 1.0 / deg[recv]
        ctx = GraphContext(total, index, loops, gcn_w, pf, pf)
        return self.x[ks].reshape(-1, 1), self.y[ks].reshape(-1, 1), ctx


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class RmsgConfig:
    flavor: str = "mpnn"
    width: int = 16  # latent width between encoder, GNN and decoder
    hidden: int = 16  # hidden width of encoder/decoder MLPs
    mpnn_hidden: int = 32
    heads: int = 4
    n_layers: int = 1
    activation: str = "relu"
    lr: float = 3e-3
    lr_final: float = 3e-4
    batch_graphs: int = 1
    epochs: int = 1
    n_train: int = DESK_SCALE["n_train"]
    n_val: int = DESK_SCALE["n_val"]
    n_test: int = DESK_SCALE["n_test"]
    eval_batch: int = 256

    def __post_init__(self):
        if self.flavor not in RMSG_FLAVORS:
            raise ValueError(f"RMSG flavor must be one of {RMSG_FLAVORS}, got {self.flavor!r}")

    @classmethod
    def paper_scale(cls, **kw) -> "RmsgConfig":
        return cls(**{**PAPER_SCALE, **kw})

    def to_json(self) -> dict:
        return asdict(self)


class RmsgModel:
    """Encoder MLP [1 -> hidden -> width], GNN layer(s), decoder MLP [width -> hidden -> 1]."""

    def __init__(self, config: RmsgConfig, rng: np.random.Generator | int):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        c = config
        self.config = c
        self.encoder = make_mlp([1, c.hidden, c.width], rng, c.activation)
        self.layers: list[SpatialLayer] = [
            make_spatial(
                c.flavor, c.width, rng, heads=c.heads, hidden=c.mpnn_hidden,
                scalars=("pf",), activation=c.activation,
            )
            for _ in range(c.n_layers)
        ]
        self.decoder = make_mlp([c.width, c.hidden, 1], rng, c.activation)
        # A zero output layer lets the bias find the label mean before the hidden
        # units see any gradient; otherwise early steps can silence every decoder ReLU.
        w_out, b_out = self.decoder.layers[-1]
        w_out.data[...] = 0.0
        b_out.data[...] = 0.0

    def named_parameters(self):
        out = self.encoder.named_parameters("encoder")
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"gnn{i}")
        return out + self.decoder.named_parameters("decoder")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tg.save_checkpoint(self.named_parameters(), directory / "weights.json")
        (directory / "config.json").write_text(json.dumps(self.config.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "RmsgModel":
        directory = Path(directory)
        model = cls(RmsgConfig(**json.loads((directory / "config.json").read_text())), 0)
        tg.restore(model.named_parameters(), tg.load_checkpoint(directory / "weights.json"))
        return model

    def __call__(self, x, ctx: GraphContext) -> Tensor:
        h = mlp_apply(self.encoder, x)
        for i, layer in enumerate(self.layers):
            h = layer(h, ctx)
            if i + 1 < len(self.layers):
                h = tg.activation(self.config.activation)(h)
        return mlp_apply(self.decoder, h)


class AverageModel:
    """Predicts the mean training label for every node of every graph."""

    def __init__(self, value: float):
        self.value = float(value)

    @classmethod
    def fit(cls, labels) -> "AverageModel":
        total, count = 0.0, 0
        for chunk in labels:
            arr = np.asarray(chunk, dtype=float).ravel()
            total += float(arr.sum())
            count += arr.size
        if count == 0:
            raise tg.ContractError("cannot fit the average model on an empty stream")
        return cls(total / count)

    def predict(self, n: int) -> np.ndarray:
        return np.full(n, self.value)


def average_model(train_labels) -> AverageModel:
    return AverageModel.fit(train_labels)


def n_params_mlp(widths: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(widths[:-1], widths[1:])))


# ---------------------------------------------------------------------------
# Metrics and residuals
# ---------------------------------------------------------------------------


def eval_metrics(y, h) -> dict[str, float]:
    y = np.asarray(y, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    if y.shape != h.shape:
        raise tg.ShapeError(f"labels {y.shape} and predictions {h.shape} differ")
    if y.size < 2:
        raise ValueError("need at least two points")
    err = y - h
    ss_tot = float(np.sum((y - y.sum() / y.size) ** 2))
    if ss_tot == 0.0:
        raise ValueError("labels have zero variance; R^2 undefined")
    return {
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mae": float(np.mean(np.abs(err))),
        "r2": float(1.0 - np.sum(err**2) / ss_tot),
    }


@dataclass
class ResidualReport:
    residuals: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    label_edges: np.ndarray
    label_counts: np.ndarray
    label_mean_residual: np.ndarray  # NaN where a label bin is empty
    label_quantiles: dict
    pred_quantiles: dict
    dist_edges: np.ndarray
    label_hist: np.ndarray
    pred_hist: np.ndarray

    def max_abs_binned(self) -> float:
        return float(np.nanmax(np.abs(self.label_mean_residual)))

    def curve_rows(self):
        for lo, hi, n, m in zip(self.label_edges[:-1], self.label_edges[1:], self.label_counts, self.label_mean_residual):
            yield {"label_lo": lo, "label_hi": hi, "count": int(n), "mean_residual": m}

    def write_csv(self, directory: str | Path) -> None:
        directory = Path(directory)
        _write_rows(directory / "residual_curve.csv", list(self.curve_rows()))
        _write_rows(
            directory / "residual_hist.csv",
            [{"lo": a, "hi": b, "count": int(c)} for a, b, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts)],
        )
        _write_rows(
            directory / "distributions.csv",
            [
                {"lo": a, "hi": b, "labels": int(c), "predictions": int(d)}
                for a, b, c, d in zip(self.dist_edges[:-1], self.dist_edges[1:], self.label_hist, self.pred_hist)
            ],
        )


def _bin_range(v: np.ndarray) -> tuple[float, float]:
    lo, hi = float(v.min()), float(v.max())
    # a range too narrow to split is treated as a single value
    if hi - lo <= 1e-9 * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        return mid - 0.5, mid + 0.5
    return lo, hi


def residual_analysis(y, h, bins: int = 20, hist_bins: int = 50) -> ResidualReport:
    y = np.asarray(y, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    if y.shape != h.shape:
        raise tg.ShapeError(f"labels {y.shape} and predictions {h.shape} differ")
    if bins < 2 or hist_bins < 2:
        raise ValueError("need at least two bins")
    r = y - h
    hist_counts, hist_edges = np.histogram(r, bins=hist_bins, range=_bin_range(r))
    label_edges = np.linspace(*_bin_range(y), bins + 1)
    which = np.clip(np.searchsorted(label_edges, y, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    sums = np.bincount(which, weights=r, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    qs = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
    both = np.concatenate([y, h])
    dist_edges = np.linspace(*_bin_range(both), hist_bins + 1)
    return ResidualReport(
        residuals=r,
        hist_counts=hist_counts,
        hist_edges=hist_edges,
        label_edges=label_edges,
        label_counts=counts,
        label_mean_residual=means,
        label_quantiles={q: float(np.quantile(y, q)) for q in qs},
        pred_quantiles={q: float(np.quantile(h, q)) for q in qs},
        dist_edges=dist_edges,
        label_hist=np.histogram(y, bins=dist_edges)[0],
        pred_hist=np.histogram(h, bins=dist_edges)[0],
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunRow:
    seed: int
    flavor: str
    n_params: int
    rmse: float = math.nan
    mae: float = math.nan
    r2: float = math.nan
    val_rmse: float = math.nan
    status: str = "ok"
    seconds: float = 0.0


def predict(model, data: RmsgSet, chunk: int = 256) -> np.ndarray:
    out = np.empty(data.x.shape)
    with tg.no_grad():
        for lo in range(0, len(data), chunk):
            ks = np.arange(lo, min(lo + chunk, len(data)))
            x, _, ctx = data.batch(ks)
            out[ks] = model(x, ctx).data.reshape(ks.size, -1)
    return out


def _lr_at(c: RmsgConfig, step: int, total: int) -> float:
    """Cosine decay from ``lr`` to ``lr_final``."""
    frac = step / max(total - 1, 1)
    return c.lr_final + 0.5 * (c.lr - c.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    model: RmsgModel
    row: RunRow
    val_pred: np.ndarray | None = None
    test_pred: np.ndarray | None = None
    history: list = field(default_factory=list)


def train_rmsg(
    config: RmsgConfig,
    seed: int,
    data: dict[str, RmsgSet] | None = None,
    evaluate_test: bool = True,
) -> TrainResult:
    """Minibatch Adam on RMSE, then metrics on the test stream.

    A non-finite loss marks the run ``failed`` instead of raising.
    """
    c = config
    start = time.perf_counter()
    data = data or rmsg_data(c, seed, test=evaluate_test)
    model = RmsgModel(c, rng_for(seed, 99))
    row = RunRow(seed, c.flavor, model.n_parameters())
    opt = tg.Adam(model.parameters(), lr=c.lr)
    order_rng = rng_for(seed, 98)
    train = data["train"]
    steps_per_epoch = len(train) // c.batch_graphs
    total = steps_per_epoch * c.epochs
    history = []
    step = 0
    try:
        for epoch in range(c.epochs):
            order = order_rng.permutation(len(train))
            running = 0.0
            for s in range(steps_per_epoch):
                ks = order[s * c.batch_graphs : (s + 1) * c.batch_graphs]
                x, y, ctx = train.batch(ks)
                opt.state.lr = _lr_at(c, step, total)
                opt.zero_grad()
                loss = tg.sqrt(((model(x, ctx) - y) ** 2).mean())
                tg.backward(loss)
                opt.step()
                running += loss.item()
                step += 1
            history.append(running / max(steps_per_epoch, 1))
            log.info("rmsg %s seed=%d epoch=%d train_rmse=%.5f", c.flavor, seed, epoch, history[-1])
    except tg.NumericError as exc:
        tg.current_tape().reset()
        row.status = f"failed: {exc}"
        row.seconds = time.perf_counter() - start
        return TrainResult(model, row, history=history)
    val_pred = predict(model, data["val"], c.eval_batch)
    row.val_rmse = eval_metrics(data["val"].y, val_pred)["rmse"]
    test_pred = None
    if evaluate_test:
        test_pred = predict(model, data["test"], c.eval_batch)
        m = eval_metrics(data["test"].y, test_pred)
        row.rmse, row.mae, row.r2 = m["rmse"], m["mae"], m["r2"]
    row.seconds = time.perf_counter() - start
    return TrainResult(model, row, val_pred, test_pred, history)


def rmsg_data(c: RmsgConfig, seed: int, test: bool = True) -> dict[str, RmsgSet]:
    out = {
        "train": RmsgSet.generate(c.n_train, seed, TRAIN),
        "val": RmsgSet.generate(c.n_val, seed, VAL),
    }
    if test:
        out["test"] = RmsgSet.generate(c.n_test, seed, TEST)
    return out


def evaluate_average(train: RmsgSet, test: RmsgSet) -> dict[str, float]:
    model = average_model([train.y])
    return eval_metrics(test.y, model.predict(test.y.size))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RmsgRunReport:
    flavor: str
    rows: list[RunRow]

    def ok_rows(self) -> list[RunRow]:
        return [r for r in self.rows if r.status == "ok"]

    def aggregate(self) -> dict:
        ok = self.ok_rows()
        out = {"flavor": self.flavor, "runs": len(self.rows), "failed": len(self.rows) - len(ok)}
        if ok:
            out["n_params"] = ok[0].n_params
        for key in ("rmse", "mae", "r2"):
            vals = np.array([getattr(r, key) for r in ok])
            out[key] = {
                "mean": float(vals.mean()) if vals.size else math.nan,
                "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            }
        return out

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_rows(directory / "metrics.csv", [_row_dict(r) for r in self.rows])
        (directory / "metrics.json").write_text(json.dumps(self.aggregate(), indent=2, sort_keys=True))


def _row_dict(r: RunRow) -> dict:
    d = asdict(r)
    d.pop("seconds")  # wall time would break byte-identical reruns
    return d


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_seeds(config: RmsgConfig, seeds: Sequence[int]) -> RmsgRunReport:
    return RmsgRunReport(config.flavor, [train_rmsg(config, s).row for s in seeds])


def size_sweep(
    flavor: str,
    size_grid: Sequence[int],
    seeds: Sequence[int],
    base: RmsgConfig | None = None,
) -> list[dict]:
    """One training run per (size, seed); ``size`` sets every hidden width of the model."""
    base = base or RmsgConfig(flavor=flavor)
    rows = []
    for size in size_grid:
        cfg = RmsgConfig(**{**base.to_json(), "flavor": flavor, "width": size, "hidden": size, "mpnn_hidden": size})
        for seed in seeds:
            row = train_rmsg(cfg, seed).row
            rows.append({"size": size, **_row_dict(row)})
    return rows
