"""Traffic-speed pipeline: loading, scaling, windowing, baselines, masked metrics, training.

Zeros in the speed series are missing readings (the METR-LA convention); they
are excluded from every metric and, by default, from the training loss.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .backbone import WaveNet, WaveNetConfig, wavenet_forward
from .graphs import AdjacencySet, Graph, GraphError, load_adjacency_csv, rng_for

log = logging.getLogger(__name__)

DEFAULT_PROBES = (3, 6, 12)
MAPE_FLOOR = 1e-6


class LoadError(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass
class TrafficTensor:
    values: np.ndarray  # (D, N, L), missing entries hold 0
    timestamps: np.ndarray  # datetime64[m], (L,)
    node_ids: list[str]
    missing: np.ndarray  # (D, N, L) bool

    def __post_init__(self):
        if self.values.ndim != 3:
            raise LoadError(f"values must be (D, N, L), got {self.values.shape}")
        if self.missing.shape != self.values.shape:
            raise LoadError("missing mask shape differs from values")
        if len(self.node_ids) != self.values.shape[1] or self.timestamps.shape[0] != self.values.shape[2]:
            raise LoadError("metadata lengths disagree with values")
        if np.any(self.values[self.missing] != 0):
            raise LoadError("missing entries must hold 0")
        steps = np.diff(self.timestamps)
        if steps.size and (np.any(steps <= np.timedelta64(0, "m")) or np.any(steps != steps[0])):
            raise LoadError("timestamps must increase with a constant step")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def granularity(self) -> int:
        """Minutes between consecutive steps."""
        if self.length < 2:
            return 0
        return int((self.timestamps[1] - self.timestamps[0]) / np.timedelta64(1, "m"))

    @property
    def missing_rate(self) -> float:
        return float(self.missing.mean())

    def slice_time(self, lo: int, hi: int) -> "TrafficTensor":
        return TrafficTensor(
            self.values[:, :, lo:hi], self.timestamps[lo:hi], list(self.node_ids), self.missing[:, :, lo:hi]
        )

    def select_nodes(self, nodes: Sequence[int]) -> "TrafficTensor":
        nodes = list(nodes)
        return TrafficTensor(
            self.values[:, nodes], self.timestamps, [self.node_ids[i] for i in nodes], self.missing[:, nodes]
        )

    @classmethod
    def from_values(cls, values, timestamps, node_ids=None) -> "TrafficTensor":
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            v = v[None]
        ts = np.asarray(timestamps, dtype="datetime64[m]")
        ids = list(node_ids) if node_ids is not None else [str(i) for i in range(v.shape[1])]
        return cls(v, ts, ids, v == 0)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def read_values_csv(path: str | Path) -> TrafficTensor:
    """CSV with a header ``timestamp,<node id>,...`` and one row per timestep."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        ids = header[1:]
        if not ids:
            raise LoadError(f"{path}: header lists no node columns")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
            try:
                stamps.append(np.datetime64(row[0].strip().replace(" ", "T"), "m"))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            try:
                rows.append([float(c) if c.strip() else 0.0 for c in row[1:]])
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: non-numeric value ({exc})") from None
    if not rows:
        raise LoadError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[m]")
    steps = np.diff(ts)
    if steps.size:
        bad = np.nonzero(steps <= np.timedelta64(0, "m"))[0]
        if bad.size:
            raise LoadError(f"{path}:{bad[0] + 3}: timestamp not after the previous row")
        irregular = np.nonzero(steps != steps[0])[0]
        if irregular.size:
            raise LoadError(f"{path}:{irregular[0] + 3}: timestep differs from {steps[0]}")
    v = np.array(rows, dtype=float).T[None]
    if not np.isfinite(v).all():
        raise LoadError(f"{path}: non-finite values")
    return TrafficTensor(v, ts, ids, v == 0)


def write_values_csv(t: TrafficTensor, path: str | Path, metric: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + list(t.node_ids))
        for k in range(t.length):
            w.writerow([str(t.timestamps[k])] + [repr(float(v)) for v in t.values[metric, :, k]])


def write_adjacency_csv(a: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(a, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def load_dataset(values_path, adjacency_path, adaptive_width: int = 0) -> tuple[TrafficTensor, AdjacencySet]:
    data = read_values_csv(values_path)
    try:
        a = load_adjacency_csv(adjacency_path)
    except GraphError as exc:
        raise LoadError(str(exc)) from None
    if a.shape[0] != data.n_nodes:
        raise LoadError(f"adjacency has {a.shape[0]} nodes but {values_path} has {data.n_nodes} columns")
    if (a < 0).any():
        raise LoadError(f"{adjacency_path}: negative adjacency entries")
    return data, AdjacencySet.from_adjacency(a, adaptive_width or None)


# ---------------------------------------------------------------------------
# Windows and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    obs: int = 12
    horizon: int = 0
    forecast: int = 12
    probes: tuple[int, ...] = DEFAULT_PROBES

    def __post_init__(self):
        if self.obs < 1 or self.forecast < 1 or self.horizon < 0:
            raise WindowError("need obs >= 1, forecast >= 1, horizon >= 0")
        if any(p < 1 or p > self.forecast for p in self.probes):
            raise WindowError(f"probes {self.probes} must lie in [1, {self.forecast}]")

    @property
    def span(self) -> int:
        return self.obs + self.horizon + self.forecast


@dataclass
class WindowSet:
    """All windows whose observation and target blocks fit inside ``[start, stop)``."""

    data: TrafficTensor
    spec: WindowSpec
    start: int
    stop: int

    def __post_init__(self):
        if self.stop - self.start - self.spec.span + 1 <= 0:
            raise WindowError(
                f"partition [{self.start}, {self.stop}) is too short for one window of span {self.spec.span}"
            )

    @property
    def origins(self) -> np.ndarray:
        """Forecast times ``l``: observation is ``[l - obs, l)``."""
        s = self.spec
        return np.arange(self.start + s.obs, self.stop - s.horizon - s.forecast + 1)

    def __len__(self) -> int:
        return self.stop - self.start - self.spec.span + 1

    def blocks(self, which=None, values: np.ndarray | None = None):
        """Observation ``(S, D, N, obs)``, target ``(S, D, N, forecast)`` and target-missing mask."""
        s = self.spec
        org = self.origins if which is None else self.origins[np.asarray(which)]
        src = self.data.values if values is None else values
        obs_idx = org[:, None] + np.arange(-s.obs, 0)[None, :]
        tgt_idx = org[:, None] + s.horizon + np.arange(s.forecast)[None, :]
        obs = np.moveaxis(src[:, :, obs_idx], 2, 0)
        tgt = np.moveaxis(self.data.values[:, :, tgt_idx], 2, 0)
        miss = np.moveaxis(self.data.missing[:, :, tgt_idx], 2, 0)
        return obs, tgt, miss

    def target_times(self, which=None) -> np.ndarray:
        s = self.spec
        org = self.origins if which is None else self.origins[np.asarray(which)]
        return self.data.timestamps[org[:, None] + s.horizon + np.arange(s.forecast)[None, :]]


def split_bounds(length: int, ratios=(0.7, 0.1, 0.2)) -> list[tuple[int, int]]:
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) < 0:
        raise WindowError(f"ratios {ratios} must be three non-negative numbers summing to 1")
    cuts = [0]
    acc = 0.0
    for r in ratios[:-1]:
        acc += r
        cuts.append(int(math.floor(round(acc * length, 9))))
    cuts.append(length)
    return list(zip(cuts[:-1], cuts[1:]))


def split_and_window(t: TrafficTensor, ratios=(0.7, 0.1, 0.2), w: WindowSpec = WindowSpec()) -> dict[str, WindowSet]:
    """Chronological train/val/test partitions, windows never crossing a boundary."""
    bounds = split_bounds(t.length, ratios)
    return {name: WindowSet(t, w, lo, hi) for name, (lo, hi) in zip(("train", "val", "test"), bounds)}


# ---------------------------------------------------------------------------
# Scaler
# ---------------------------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)

    @classmethod
    def fit(cls, values: np.ndarray, missing: np.ndarray | None = None) -> "Scaler":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[None, None, :]
        missing = np.zeros(values.shape, bool) if missing is None else np.asarray(missing, bool).reshape(values.shape)
        means, stds = [], []
        for d in range(values.shape[0]):
            obs = values[d][~missing[d]]
            if obs.size == 0:
                raise ValueError("cannot fit a scaler on empty or fully-masked data")
            sd = float(obs.std())
            means.append(float(obs.mean()))
            stds.append(sd if sd >= 1e-8 else 1.0)
        return cls(np.array(means), np.array(stds))

    def _shape(self, x: np.ndarray, axis: int):
        shape = [1] * x.ndim
        shape[axis] = -1
        return self.mean.reshape(shape), self.std.reshape(shape)

    def apply(self, x, axis: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m, s = self._shape(x, axis) if x.ndim else (self.mean[0], self.std[0])
        return (x - m) / s

    def invert(self, z, axis: int = 0) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        m, s = self._shape(z, axis) if z.ndim else (self.mean[0], self.std[0])
        return z * s + m


def scaler_fit(values, missing=None) -> Scaler:
    return Scaler.fit(values, missing)


def scaler_apply(s: Scaler, x, axis: int = 0) -> np.ndarray:
    return s.apply(x, axis)


def scaler_invert(s: Scaler, z, axis: int = 0) -> np.ndarray:
    return s.invert(z, axis)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def copy_last_steps(obs, forecast: int) -> np.ndarray:
    """Repeat the last observation block step ``forecast`` times: ``(..., obs) -> (..., forecast)``."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] < 1:
        raise WindowError("observation block is empty")
    return np.repeat(obs[..., -1:], forecast, axis=-1)


class HistoricalAverage:
    """Mean of the training data per node and time-of-week slot, ignoring missing entries."""

    def __init__(self, slot_means: np.ndarray, node_means: np.ndarray, global_mean: np.ndarray, granularity: int):
        self.slot_means = slot_means  # (D, N, slots), NaN where a slot had no data
        self.node_means = node_means  # (D, N)
        self.global_mean = global_mean  # (D,)
        self.granularity = granularity

    @property
    def n_slots(self) -> int:
        return self.slot_means.shape[-1]

    @staticmethod
    def slots(timestamps: np.ndarray, granularity: int) -> np.ndarray:
        minutes = (np.asarray(timestamps, dtype="datetime64[m]") - np.datetime64("1970-01-05T00:00", "m")).astype(np.int64)
        minute_of_week = np.mod(minutes, 7 * 24 * 60)  # 1970-01-05 was a Monday
        return minute_of_week // granularity

    @classmethod
    def fit(cls, train: TrafficTensor) -> "HistoricalAverage":
        if train.length == 0 or train.missing.all():
            raise ValueError("historical average needs non-empty training data")
        gran = train.granularity or 5
        n_slots = (7 * 24 * 60) // gran
        slot = cls.slots(train.timestamps, gran)
        obs = ~train.missing
        vals = np.where(obs, train.values, 0.0)
        d, n, _ = vals.shape
        sums = np.zeros((d, n, n_slots))
        counts = np.zeros((d, n, n_slots))
        np.add.at(sums, (slice(None), slice(None), slot), vals)
        np.add.at(counts, (slice(None), slice(None), slot), obs.astype(float))
        with np.errstate(invalid="ignore", divide="ignore"):
            slot_means = np.where(counts > 0, sums / counts, np.nan)
            node_counts = obs.sum(axis=2)
            node_means = np.where(node_counts > 0, vals.sum(axis=2) / np.maximum(node_counts, 1), np.nan)
        global_mean = vals.sum(axis=(1, 2)) / obs.sum(axis=(1, 2))
        return cls(slot_means, node_means, global_mean, gran)

    def predict(self, timestamps) -> np.ndarray:
        """Forecast for target times of shape ``(...)``; returns ``(..., D, N)``."""
        ts = np.asarray(timestamps, dtype="datetime64[m]")
        slot = self.slots(ts.ravel(), self.granularity)
        out = self.slot_means[:, :, slot]  # (D, N, K)
        node_fill = np.where(np.isnan(self.node_means), self.global_mean[:, None], self.node_means)
        out = np.where(np.isnan(out), node_fill[:, :, None], out)
        return np.moveaxis(out, -1, 0).reshape(ts.shape + out.shape[:2])

    def forecast_windows(self, windows: WindowSet, which=None) -> np.ndarray:
        """Predictions shaped like ``WindowSet.blocks`` targets: ``(S, D, N, forecast)``."""
        pred = self.predict(windows.target_times(which))  # (S, F, D, N)
        return np.moveaxis(pred, 1, -1)


def historical_average(train: TrafficTensor) -> HistoricalAverage:
    return HistoricalAverage.fit(train)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def traffic_metrics(pred, target, missing=None, probes: Sequence[int] = DEFAULT_PROBES) -> dict[int, dict[str, float]]:
    """Per-probe RMSE / MAE / MAPE (percent) over every sample and node.

    Arrays share a trailing forecast axis; probe ``p`` reads step ``p - 1``.
    Zero targets and entries flagged in ``missing`` are excluded.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise tg.ShapeError(f"predictions {pred.shape} and targets {target.shape} differ")
    valid = target != 0
    if missing is not None:
        valid &= ~np.asarray(missing, bool)
    out = {}
    for p in probes:
        if not 1 <= p <= target.shape[-1]:
            raise WindowError(f"probe {p} outside forecast window of {target.shape[-1]}")
        v = valid[..., p - 1]
        if not v.any():
            raise ValueError(f"probe {p}: every target is masked")
        err = pred[..., p - 1][v] - target[..., p - 1][v]
        t = target[..., p - 1][v]
        nz = np.abs(t) >= MAPE_FLOOR
        out[int(p)] = {
            "rmse": float(np.sqrt(np.mean(err**2))),
            "mae": float(np.mean(np.abs(err))),
            "mape": float(np.mean(np.abs(err[nz]) / np.abs(t[nz])) * 100.0) if nz.any() else math.nan,
        }
    return out


def metrics_rows(metrics: dict[int, dict[str, float]], granularity: int = 5) -> dict[str, float]:
    """Flatten to Table-3 style columns: ``rmse_15min``, ``mae_30min``, ..."""
    row = {}
    for key in ("rmse", "mae", "mape"):
        for p, m in metrics.items():
            row[f"{key}_{p * granularity}min"] = m[key]
    return row


def mean_mae(metrics: dict[int, dict[str, float]]) -> float:
    return float(np.mean([m["mae"] for m in metrics.values()]))


def baseline_report(data: TrafficTensor, w: WindowSpec = WindowSpec(), ratios=(0.7, 0.1, 0.2)) -> dict:
    """CopyLastSteps and HistoricalAverage on the test partition."""
    splits = split_and_window(data, ratios, w)
    test = splits["test"]
    train = data.slice_time(splits["train"].start, splits["train"].stop)
    ha = historical_average(train)
    out = {}
    obs, tgt, miss = test.blocks()
    out["copylast"] = traffic_metrics(copy_last_steps(obs, w.forecast), tgt, miss, w.probes)
    out["histavg"] = traffic_metrics(ha.forecast_windows(test), tgt, miss, w.probes)
    return out


# ---------------------------------------------------------------------------
# Synthetic road data (for running the pipeline without METR-LA)
# ---------------------------------------------------------------------------


def synthetic_traffic(
    n_nodes: int = 24,
    days: int = 14,
    seed: int = 0,
    granularity: int = 5,
    missing_rate: float = 0.05,
    noise: float = 2.0,
    start: str = "2012-03-01T00:00",
) -> tuple[TrafficTensor, np.ndarray]:
    """Speeds on a directed corridor network with rush hours, spillback and missing readings.

    Congestion at a node grows with scheduled demand and with congestion
    downstream, and the growth is strongest when both the node and its
    downstream neighbour are congested (a pairwise interaction).
    """
    rng = rng_for(seed, 7)
    steps_per_day = 24 * 60 // granularity
    length = days * steps_per_day
    # Two parallel corridors with cross links; edges point downstream.
    half = n_nodes // 2
    a = np.zeros((n_nodes, n_nodes))
    dist = rng.uniform(0.5, 2.0, size=n_nodes)
    for i in range(n_nodes):
        lane_end = half - 1 if i < half else n_nodes - 1
        if i != lane_end:
            a[i, i + 1] = np.exp(-(dist[i] ** 2) / 2.0)
    for i in range(0, half, 3):
        j = min(i + half + 1, n_nodes - 1)
        a[i, j] = np.exp(-(dist[(i + 7) % n_nodes] ** 2) / 2.0)
    down = [np.nonzero(a[i])[0] for i in range(n_nodes)]

    t = np.arange(length)
    minute = (t % steps_per_day) * granularity / 60.0
    weekday = ((t // steps_per_day) + 3) % 7 < 5  # 2012-03-01 was a Thursday
    rush = np.exp(-((minute - 8.0) ** 2) / 1.0) + 0.8 * np.exp(-((minute - 17.5) ** 2) / 1.5)
    demand = np.where(weekday, rush, 0.3 * rush)
    sensitivity = rng.uniform(0.5, 1.2, size=n_nodes)
    free_flow = rng.uniform(60.0, 68.0, size=n_nodes)

    c = np.zeros((n_nodes, length))
    incident = np.zeros(n_nodes)
    for k in range(1, length):
        prev = c[:, k - 1]
        spill = np.array([prev[d].max() if d.size else 0.0 for d in down])
        incident = np.where(rng.random(n_nodes) < 0.0015, rng.uniform(0.4, 0.9, n_nodes), incident * 0.97)
        drive = 0.08 * sensitivity * demand[k] + 0.15 * prev * spill + 0.04 * spill + 0.05 * incident
        c[:, k] = np.clip(0.9 * prev + drive, 0.0, 1.0)
    speed = free_flow[:, None] * (1.0 - 0.65 * c) + rng.normal(0.0, noise, size=c.shape)
    speed = np.clip(speed, 3.0, 70.0)
    # Missing readings arrive in short outages.
    missing = np.zeros_like(speed, dtype=bool)
    n_outages = int(missing_rate * speed.size / 12)
    for _ in range(n_outages):
        i = rng.integers(n_nodes)
        s = rng.integers(length)
        missing[i, s : s + rng.integers(6, 19)] = True
    speed[missing] = 0.0
    ts = np.datetime64(start, "m") + np.arange(length) * np.timedelta64(granularity, "m")
    data = TrafficTensor(speed[None], ts, [f"s{i:03d}" for i in range(n_nodes)], missing[None])
    return data, a


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrafficConfig:
    model: dict = field(default_factory=dict)  # WaveNetConfig overrides
    lr: float = 2e-3
    batch_size: int = 16
    max_steps: int = 2000
    eval_every: int = 100
    patience: int = 10
    mask_loss: bool = True
    max_seconds: float = 1800.0
    ratios: tuple = (0.7, 0.1, 0.2)
    obs: int = 12
    horizon: int = 0
    forecast: int = 12
    probes: tuple = DEFAULT_PROBES

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.obs, self.horizon, self.forecast, tuple(self.probes))

    def to_json(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["probes"] = list(self.probes)
        return d


@dataclass
class TrafficReport:
    flavor: str
    status: str
    steps: int
    best_val_mae: float
    test: dict[int, dict[str, float]]
    n_params: int
    checked_batches: int = 0
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["test"] = {str(k): v for k, v in self.test.items()}
        return d


def _check_batch(out: tg.Tensor, tgt: np.ndarray, miss: np.ndarray, n: int, forecast: int) -> None:
    b = tgt.shape[0]
    if out.shape != (b, 1, n, forecast):
        raise tg.ContractError(f"model output {out.shape}, expected {(b, 1, n, forecast)}")
    if tgt.shape != (b, 1, n, forecast) or miss.shape != tgt.shape:
        raise tg.ContractError(f"target/mask shapes {tgt.shape}/{miss.shape} disagree with output")
    if np.any(tgt[miss] != 0):
        raise tg.ContractError("masked targets must hold the missing sentinel")


def masked_mae_loss(pred: tg.Tensor, target: np.ndarray, valid: np.ndarray) -> tg.Tensor:
    w = valid.astype(float)
    return tg.absolute(pred - target).__mul__(w).sum() / max(float(w.sum()), 1.0)


def predict_windows(model: WaveNet, windows: WindowSet, adj: AdjacencySet, scaler: Scaler, scaled: np.ndarray, batch: int = 64):
    """Original-unit forecasts ``(S, 1, N, forecast)`` for every window in the set."""
    preds = []
    with tg.no_grad():
        for lo in range(0, len(windows), batch):
            idx = np.arange(lo, min(lo + batch, len(windows)))
            obs, _, _ = windows.blocks(idx, scaled)
            preds.append(scaler.invert(wavenet_forward(model, obs, adj).data, axis=1))
    return np.concatenate(preds, axis=0)


def train_traffic(
    flavor: str,
    config: TrafficConfig,
    seed: int,
    data: TrafficTensor,
    adj: AdjacencySet,
    subset: Sequence[int] | None = None,
) -> tuple[WaveNet, TrafficReport, Scaler]:
    """Adam on masked MAE in original units, early stopping on validation MAE."""
    c = config
    w = c.window
    splits = split_and_window(data, c.ratios, w)
    train_part = data.slice_time(splits["train"].start, splits["train"].stop)
    scaler = Scaler.fit(train_part.values, train_part.missing)
    scaled = scaler.apply(data.values)
    mcfg = WaveNetConfig(
        **{**c.model, "flavor": flavor, "n_nodes": data.n_nodes, "in_dim": data.values.shape[0],
           "obs_window": w.obs, "forecast_window": w.forecast}
    )
    model = WaveNet(mcfg, rng_for(seed, 11))
    opt = tg.Adam(model.parameters(), lr=c.lr)
    rng = rng_for(seed, 12)
    train = splits["train"]
    pool = np.arange(len(train)) if subset is None else np.asarray(subset)
    best = (math.inf, None)
    since_best = 0
    history = []
    checked = 0
    status = "ok"
    start = time.perf_counter()
    step = 0
    try:
        while step < c.max_steps:
            idx = rng.choice(pool, size=min(c.batch_size, pool.size), replace=False)
            obs, tgt, miss = train.blocks(idx, scaled)
            opt.zero_grad()
            out = scaler_invert_tensor(wavenet_forward(model, obs, adj), scaler)
            _check_batch(out, tgt, miss, data.n_nodes, w.forecast)
            checked += 1
            valid = ~miss if c.mask_loss else np.ones_like(miss)
            loss = masked_mae_loss(out, tgt, valid)
            tg.backward(loss)
            opt.step()
            step += 1
            if step % c.eval_every == 0 or step == c.max_steps:
                val_mae = _eval_mae(model, splits["val"], adj, scaler, scaled, w)
                history.append({"step": step, "train_mae": loss.item(), "val_mae": val_mae})
                log.info("traffic %s step=%d loss=%.4f val_mae=%.4f", flavor, step, loss.item(), val_mae)
                if val_mae < best[0]:
                    best = (val_mae, [p.data.copy() for p in model.parameters()])
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= c.patience:
                        break
                if time.perf_counter() - start > c.max_seconds:
                    break
    except tg.NumericError as exc:
        tg.current_tape().reset()
        status = f"failed: {exc}"
    if best[1] is not None:
        for p, v in zip(model.parameters(), best[1]):
            p.data = v
    test_metrics = {}
    if status == "ok":
        pred = predict_windows(model, splits["test"], adj, scaler, scaled)
        _, tgt, miss = splits["test"].blocks()
        test_metrics = traffic_metrics(pred, tgt, miss, w.probes)
    report = TrafficReport(flavor, status, step, best[0], test_metrics, model.n_parameters(), checked, history)
    return model, report, scaler


def overfit_one_batch(
    flavor: str,
    config: TrafficConfig,
    seed: int,
    data: TrafficTensor,
    adj: AdjacencySet,
    n_windows: int = 8,
    max_steps: int = 2000,
    ratio: float = 0.05,
) -> dict:
    """Train on one fixed batch of training windows until MAE < ``ratio`` x target std."""
    w = config.window
    splits = split_and_window(data, config.ratios, w)
    train_part = data.slice_time(splits["train"].start, splits["train"].stop)
    scaler = Scaler.fit(train_part.values, train_part.missing)
    mcfg = WaveNetConfig(
        **{**config.model, "flavor": flavor, "n_nodes": data.n_nodes, "in_dim": data.values.shape[0],
           "obs_window": w.obs, "forecast_window": w.forecast}
    )
    model = WaveNet(mcfg, rng_for(seed, 11))
    idx = np.sort(rng_for(seed, 13).choice(len(splits["train"]), size=n_windows, replace=False))
    obs, tgt, miss = splits["train"].blocks(idx, scaler.apply(data.values))
    valid = ~miss & (tgt != 0)
    threshold = ratio * float(tgt[valid].std())
    opt = tg.Adam(model.parameters(), lr=config.lr)
    mae = math.inf
    step = 0
    while step < max_steps:
        opt.zero_grad()
        out = scaler_invert_tensor(wavenet_forward(model, obs, adj), scaler)
        _check_batch(out, tgt, miss, data.n_nodes, w.forecast)
        loss = masked_mae_loss(out, tgt, valid)
        mae = loss.item()
        if mae < threshold:
            tg.current_tape().reset()
            break
        tg.backward(loss)
        opt.step()
        step += 1
    return {"flavor": flavor, "steps": step, "mae": mae, "threshold": threshold, "reached": mae < threshold}


def scaler_invert_tensor(out: tg.Tensor, scaler: Scaler) -> tg.Tensor:
    shape = (1, -1, 1, 1)
    return out * scaler.std.reshape(shape) + scaler.mean.reshape(shape)


def _eval_mae(model, windows: WindowSet, adj, scaler, scaled, w: WindowSpec) -> float:
    pred = predict_windows(model, windows, adj, scaler, scaled)
    _, tgt, miss = windows.blocks()
    valid = (tgt != 0) & ~miss
    return float(np.abs(pred - tgt)[valid].mean())


def evaluate_model(model: WaveNet, data: TrafficTensor, adj: AdjacencySet, config: TrafficConfig) -> dict:
    splits = split_and_window(data, config.ratios, config.window)
    train_part = data.slice_time(splits["train"].start, splits["train"].stop)
    scaler = Scaler.fit(train_part.values, train_part.missing)
    pred = predict_windows(model, splits["test"], adj, scaler, scaler.apply(data.values))
    _, tgt, miss = splits["test"].blocks()
    return traffic_metrics(pred, tgt, miss, config.window.probes)
