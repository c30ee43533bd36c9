"""Randomized correctness checks shared by the CLI and the test-suite.

Each gradient case draws a small random graph, layer and input, then compares
tape gradients against central differences for both the input features and
the layer parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .backbone import WaveNet, WaveNetConfig, wavenet_forward
from .graphs import AdjacencySet, gen_er_graph, rng_for
from .layers import GraphContext, make_spatial

GRAD_TOL = 1e-4
EQUIVARIANCE_TOL = 1e-10
MAX_REDRAWS = 50


@dataclass
class CheckResult:
    name: str
    trials: int
    worst: float
    redraws: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} trials={self.trials} redraws={self.redraws} tol={self.tol:g}"


def random_adjacency(rng: np.random.Generator, n: int, density: float = 0.5) -> np.ndarray:
    """Directed, positively weighted adjacency without self-loops."""
    a = (rng.random((n, n)) < density) * rng.uniform(0.2, 1.0, (n, n))
    np.fill_diagonal(a, 0.0)
    return a


def _layer_case(flavor: str, rng: np.random.Generator):
    n = int(rng.integers(3, 7))
    d = int(rng.integers(2, 4))
    adj = AdjacencySet.from_adjacency(random_adjacency(rng, n), adaptive_width=2, rng=rng)
    ctx = GraphContext.from_adjacency(adj)
    layer = make_spatial(
        flavor,
        d,
        rng,
        hops=int(rng.integers(1, 3)),
        heads=int(rng.integers(1, 5)),
        hidden=3,
        n_matrices=3,
        scalars=("pf", "pb", "adaptive"),
    )
    h = rng.normal(size=(n, d))
    weights = rng.normal(size=(n, d))
    params = [p for _, p in layer.named_parameters(flavor)] + adj.parameters()

    def f_input(x):
        return (layer(x, ctx) * weights).sum()

    def f_params():
        live = GraphContext.from_adjacency(adj) if flavor in ("diffusion", "mpnn") else ctx
        return (layer(h, live) * weights).sum()

    return h, f_input, params, f_params


def _wavenet_case(rng: np.random.Generator):
    n = 4
    flavor = ("diffusion", "gat", "mpnn")[int(rng.integers(3))]
    cfg = WaveNetConfig(
        flavor=flavor,
        n_nodes=n,
        obs_window=4,
        forecast_window=2,
        dilations=[1, 2],
        residual=3,
        skip=4,
        decoder_hidden=5,
        adaptive_width=2,
        heads=2,
        mpnn_hidden=3,
    )
    model = WaveNet(cfg, rng)
    adj = AdjacencySet.from_adjacency(random_adjacency(rng, n))
    window = rng.normal(size=(2, 1, n, 4))
    weights = rng.normal(size=(2, 1, n, 2))

    def f_input(x):
        return (wavenet_forward(model, x, adj) * weights).sum()

    def f_params():
        return (wavenet_forward(model, window, adj) * weights).sum()

    return window, f_input, model.parameters(), f_params


GRAD_CASES: dict[str, Callable] = {
    "gcn": lambda rng: _layer_case("gcn", rng),
    "diffusion": lambda rng: _layer_case("diffusion", rng),
    "gat": lambda rng: _layer_case("gat", rng),
    "mpnn": lambda rng: _layer_case("mpnn", rng),
    "wavenet": _wavenet_case,
}


def grad_suite(name: str, trials: int = 100, seed: int = 0, eps: float = 1e-5, max_entries: int = 40) -> CheckResult:
    """Worst relative error over ``trials`` random draws; draws that land near a kink are redrawn."""
    build = GRAD_CASES[name]
    worst = 0.0
    redraws = 0
    for t in range(trials):
        rng = rng_for(seed, 31, t)
        for _ in range(MAX_REDRAWS):
            x, f_input, params, f_params = build(rng)
            try:
                err_x = tg.gradcheck(f_input, x, eps=eps)
                err_p = tg.gradcheck_params(f_params, params, eps=eps, max_entries=max_entries, rng=rng)
            except tg.KinkError:
                redraws += 1
                continue
            worst = max(worst, err_x, err_p)
            break
        else:
            raise tg.ContractError(f"{name}: every draw hit an activation kink")
    return CheckResult(f"gradcheck[{name}]", trials, worst, redraws, GRAD_TOL)


def permute_nodes(x: np.ndarray, perm: np.ndarray, axis: int = 0) -> np.ndarray:
    """Move entry ``i`` along ``axis`` to position ``perm[i]``."""
    return np.take(x, np.argsort(perm), axis=axis)


def equivariance_gap(name: str, rng: np.random.Generator) -> float:
    """``max |f(P x) - P f(x)|`` for one random graph, relabeling and input."""
    n = int(rng.integers(2, 9))
    perm = rng.permutation(n)
    if name == "wavenet":
        flavor = ("diffusion", "gat", "mpnn")[int(rng.integers(3))]
        cfg = WaveNetConfig(
            flavor=flavor, n_nodes=n, obs_window=5, forecast_window=3, dilations=[1, 2, 1],
            residual=4, skip=5, decoder_hidden=6, adaptive_width=3, heads=2, mpnn_hidden=4,
        )
        model = WaveNet(cfg, rng)
        adj = AdjacencySet.from_adjacency(random_adjacency(rng, n))
        x = rng.normal(size=(2, 1, n, 5))
        with tg.no_grad():
            base = wavenet_forward(model, x, adj).data
            moved = wavenet_forward(model.relabeled(perm), permute_nodes(x, perm, 2), adj.relabel(perm)).data
        return float(np.max(np.abs(moved - permute_nodes(base, perm, 2))))
    d = 3
    if name in ("gcn", "gat", "mpnn") and rng.random() < 0.5:
        # undirected unweighted graphs, the RMSG setting
        g = gen_er_graph(n, 0.5, rng)
        ctx, ctx_p = GraphContext.from_graphs([g]), GraphContext.from_graphs([g.relabel(perm)])
        scalars = ("pf",)
    else:
        adj = AdjacencySet.from_adjacency(random_adjacency(rng, n), adaptive_width=2, rng=rng)
        ctx, ctx_p = GraphContext.from_adjacency(adj), GraphContext.from_adjacency(adj.relabel(perm))
        scalars = ("pf", "pb", "adaptive")
    layer = make_spatial(name, d, rng, hops=2, heads=3, hidden=4, n_matrices=3, scalars=scalars)
    h = rng.normal(size=(n, d))
    with tg.no_grad():
        base = layer(h, ctx).data
        moved = layer(permute_nodes(h, perm), ctx_p).data
    return float(np.max(np.abs(moved - permute_nodes(base, perm))))


def equivariance_suite(name: str, trials: int = 50, seed: int = 0) -> CheckResult:
    worst = max(equivariance_gap(name, rng_for(seed, 37, t)) for t in range(trials))
    return CheckResult(f"equivariance[{name}]", trials, worst, 0, EQUIVARIANCE_TOL)
