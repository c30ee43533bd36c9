"""Graph WaveNet style forecaster with a swappable spatial layer."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .graphs import DEFAULT_ADAPTIVE_WIDTH, AdjacencySet
from .layers import GraphContext, SpatialLayer, make_spatial
from .tensorgrad import MlpParams, Tensor, init_uniform, make_mlp, mlp_apply

BACKBONE_FLAVORS = ("diffusion", "gat", "mpnn")


@dataclass
class GtcnParams:
    """Filter and gate convolutions; each weight is ``(kernel * c_in, c_out)``."""

    filter_w: Tensor
    filter_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    kernel: int
    dilation: int
    combine: str = "product"

    def __post_init__(self):
        if self.kernel < 2:
            raise ValueError("kernel size must be at least 2")
        if self.dilation < 1:
            raise ValueError("dilation must be at least 1")
        if self.filter_w is self.gate_w or self.filter_b is self.gate_b:
            raise ValueError("filter and gate must not share parameters")
        if self.combine not in ("product", "sum"):
            raise ValueError(f"unknown gate combination {self.combine!r}")

    @property
    def shrink(self) -> int:
        return (self.kernel - 1) * self.dilation

    def named_parameters(self, prefix="gtcn"):
        return [
            (f"{prefix}.filter_w", self.filter_w),
            (f"{prefix}.filter_b", self.filter_b),
            (f"{prefix}.gate_w", self.gate_w),
            (f"{prefix}.gate_b", self.gate_b),
        ]


def make_gtcn(c_in, c_out, kernel, dilation, rng, combine="product") -> GtcnParams:
    fan = kernel * c_in
    return GtcnParams(
        init_uniform(rng, fan, (fan, c_out)),
        init_uniform(rng, fan, (c_out,)),
        init_uniform(rng, fan, (fan, c_out)),
        init_uniform(rng, fan, (c_out,)),
        kernel,
        dilation,
        combine,
    )


def _dilated_conv(x: Tensor, w: Tensor, b: Tensor, kernel: int, dilation: int) -> Tensor:
    """Valid causal convolution over axis -2 of ``(..., T, C)``."""
    t_out = x.shape[-2] - (kernel - 1) * dilation
    taps = [x[..., q * dilation : q * dilation + t_out, :] for q in range(kernel)]
    return tg.matmul(tg.concat(taps, axis=-1), w) + b


def gtcn_apply(x: Tensor, p: GtcnParams) -> Tensor:
    """Gated TCN on node-first ``(N, B, T, C)`` features."""
    if x.shape[-2] <= p.shrink:
        raise tg.ShapeError(f"time extent {x.shape[-2]} too short for receptive extent {p.shrink + 1}")
    filt = tg.tanh(_dilated_conv(x, p.filter_w, p.filter_b, p.kernel, p.dilation))
    gate = tg.sigmoid(_dilated_conv(x, p.gate_w, p.gate_b, p.kernel, p.dilation))
    return filt * gate if p.combine == "product" else filt + gate


def gtcn_forward(h, p: GtcnParams) -> Tensor:
    """Gated TCN on ``(batch, d, N, T)``; returns ``(batch, d', N, T - (k-1)*dilation)``."""
    h = tg.as_tensor(h)
    if h.ndim != 4:
        raise tg.ShapeError(f"expected (batch, d, N, T), got {h.shape}")
    out = gtcn_apply(tg.transpose(h, (2, 0, 3, 1)), p)
    return tg.transpose(out, (1, 3, 0, 2))


def receptive_field(kernel: int, dilations) -> int:
    return 1 + sum((kernel - 1) * d for d in dilations)


@dataclass
class WaveNetConfig:
    flavor: str = "mpnn"
    n_nodes: int = 207
    in_dim: int = 1
    obs_window: int = 12
    forecast_window: int = 12
    kernel: int = 2
    dilations: list[int] = field(default_factory=lambda: [1, 2, 1, 2, 1, 2, 1, 2])
    residual: int = 32
    skip: int = 64
    decoder_hidden: int = 128
    encoder_hidden: int = 0
    adaptive_width: int = DEFAULT_ADAPTIVE_WIDTH
    hops: int = 2
    heads: int = 4
    mpnn_hidden: int = 32
    activation: str = "relu"
    gate_combine: str = "product"

    def __post_init__(self):
        if self.flavor not in BACKBONE_FLAVORS:
            raise ValueError(f"backbone flavor must be one of {BACKBONE_FLAVORS}, got {self.flavor!r}")
        if self.obs_window < 1 or self.forecast_window < 1:
            raise ValueError("window lengths must be positive")

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel, self.dilations)

    @property
    def n_layers(self) -> int:
        return len(self.dilations)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "WaveNetConfig":
        return cls(**doc)


class WaveNet:
    """Encoder -> [G-TCN -> spatial -> residual] x L -> concatenated skips -> decoder."""

    def __init__(self, config: WaveNetConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        c = config
        self.config = c
        widths = [c.in_dim] + ([c.encoder_hidden] if c.encoder_hidden else []) + [c.residual]
        self.encoder: MlpParams = make_mlp(widths, rng, c.activation)
        self.temporal = [
            make_gtcn(c.residual, c.residual, c.kernel, d, rng, c.gate_combine) for d in c.dilations
        ]
        use_adaptive = c.adaptive_width > 0
        self.spatial: list[SpatialLayer] = [
            make_spatial(
                c.flavor,
                c.residual,
                rng,
                hops=c.hops,
                heads=c.heads,
                hidden=c.mpnn_hidden,
                n_matrices=3 if use_adaptive else 2,
                scalars=("pf", "pb", "adaptive") if use_adaptive else ("pf", "pb"),
                activation=c.activation,
            )
            for _ in c.dilations
        ]
        self.skips = [
            (init_uniform(rng, c.residual, (c.residual, c.skip)), init_uniform(rng, c.residual, (c.skip,)))
            for _ in c.dilations
        ]
        self.decoder: MlpParams = make_mlp(
            [c.skip * c.n_layers, c.decoder_hidden, c.forecast_window], rng, c.activation
        )
        self.e1 = self.e2 = None
        # GAT consumes only neighbourhoods, so it has no use for an adaptive matrix.
        if use_adaptive and c.flavor != "gat":
            self.e1 = Tensor(rng.normal(size=(c.n_nodes, c.adaptive_width)), requires_grad=True)
            self.e2 = Tensor(rng.normal(size=(c.n_nodes, c.adaptive_width)), requires_grad=True)
        self._ctx_key = None
        self._ctx_base: GraphContext | None = None

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named_parameters("encoder")
        for i, (tp, sp_, (ws, bs)) in enumerate(zip(self.temporal, self.spatial, self.skips)):
            out += tp.named_parameters(f"layer{i}.gtcn")
            out += sp_.named_parameters(f"layer{i}.{sp_.flavor}")
            out += [(f"layer{i}.skip.weight", ws), (f"layer{i}.skip.bias", bs)]
        out += self.decoder.named_parameters("decoder")
        if self.e1 is not None:
            out += [("adaptive.e1", self.e1), ("adaptive.e2", self.e2)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tg.save_checkpoint(self.named_parameters(), directory / "weights.json")
        (directory / "config.json").write_text(json.dumps(self.config.to_json(), indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "WaveNet":
        directory = Path(directory)
        cfg = WaveNetConfig.from_json(json.loads((directory / "config.json").read_text()))
        model = cls(cfg)
        tg.restore(model.named_parameters(), tg.load_checkpoint(directory / "weights.json"))
        return model

    def relabeled(self, perm: np.ndarray) -> "WaveNet":
        """Copy whose per-node parameters follow node ``i`` to position ``perm[i]``."""
        other = copy.deepcopy(self)
        if other.e1 is not None:
            inv = np.argsort(perm)
            other.e1.data = self.e1.data[inv].copy()
            other.e2.data = self.e2.data[inv].copy()
        other._ctx_key = None
        return other

    # -- forward ------------------------------------------------------------

    def context(self, adj: AdjacencySet) -> GraphContext:
        if adj.n_nodes != self.config.n_nodes:
            raise tg.ShapeError(f"adjacency has {adj.n_nodes} nodes, model expects {self.config.n_nodes}")
        if self._ctx_key is not adj:
            self._ctx_base = GraphContext.from_adjacency(replace(adj, e1=None, e2=None))
            self._ctx_key = adj
        if self.e1 is None:
            return self._ctx_base
        return replace(self._ctx_base, adaptive=AdjacencySet(adj.p_f, adj.p_b, self.e1, self.e2).adaptive())

    def forward_nodes(self, x: Tensor, ctx: GraphContext) -> Tensor:
        """Node-first core: ``(N, B, T, D)`` -> ``(N, B, L_FW)``."""
        c = self.config
        rf = c.receptive_field
        if x.shape[2] < rf:
            pad = np.zeros(x.shape[:2] + (rf - x.shape[2], x.shape[3]))
            x = tg.concat([pad, x], axis=2)
        h = mlp_apply(self.encoder, x)
        taps = []
        for tp, sp_, (ws, bs) in zip(self.temporal, self.spatial, self.skips):
            g = gtcn_apply(h, tp)
            taps.append(tg.matmul(g, ws) + bs)
            h = sp_(g, ctx) + h[:, :, tp.shrink :, :]
        t_final = h.shape[2]
        skip = tg.concat([s[:, :, s.shape[2] - t_final :, :] for s in taps], axis=-1)
        skip = tg.relu(skip[:, :, -1, :])
        return mlp_apply(self.decoder, skip)

    def __call__(self, window, adj: AdjacencySet) -> Tensor:
        return wavenet_forward(self, window, adj)


def wavenet_forward(model: WaveNet, window, adj: AdjacencySet) -> Tensor:
    """``(batch, D, N, L_OW)`` -> ``(batch, 1, N, L_FW)`` in one shot."""
    window = tg.as_tensor(window)
    c = model.config
    if window.ndim != 4:
        raise tg.ShapeError(f"expected (batch, D, N, L_OW), got {window.shape}")
    b, d, n, t = window.shape
    if d != c.in_dim or t != c.obs_window:
        raise tg.ShapeError(f"window {window.shape} does not match D={c.in_dim}, L_OW={c.obs_window}")
    if n != adj.n_nodes:
        raise tg.ShapeError(f"window has {n} nodes, adjacency has {adj.n_nodes}")
    ctx = model.context(adj)
    out = model.forward_nodes(tg.transpose(window, (2, 0, 3, 1)), ctx)
    return tg.reshape(tg.transpose(out, (1, 0, 2)), (b, 1, n, c.forecast_window))
