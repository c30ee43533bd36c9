"""Command-line front end: experiment configs, random-search tuning and run directories.

Every command writes a self-contained run directory holding the resolved
config (plus a verbatim copy of the config file, when one was given), a log,
and metrics files. Failures leave ``error.json`` behind and exit nonzero.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import json
import logging
import math
import os
import shutil
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import checks
from . import rmsg as rm
from . import tensorgrad as tg
from . import traffic as tf
from .backbone import WaveNet
from .graphs import AdjacencySet, rng_for

log = logging.getLogger("gnnflavors")

OUTPUT_ENV = "GNNFLAVORS_RUNS"
TASKS = ("rmsg", "traffic")
ALL_FLAVORS = ("gcn", "diffusion", "gat", "mpnn", "average", "copylast", "histavg")
RMSG_CHOICES = ("gcn", "gat", "mpnn", "average")
TRAFFIC_CHOICES = ("diffusion", "gat", "mpnn", "copylast", "histavg")
DEFAULT_SIZES = (2, 4, 8, 16, 32)


class UsageError(ValueError):
    pass


class SearchError(RuntimeError):
    def __init__(self, message: str, trials: list):
        super().__init__(message)
        self.trials = trials


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    task: str = "rmsg"
    flavor: str = "mpnn"
    seed: int = 0
    seeds: list[int] | None = None
    out: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    plot: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; expected one of {TASKS}")
        allowed = RMSG_CHOICES if self.task == "rmsg" else TRAFFIC_CHOICES
        if self.flavor not in allowed:
            raise UsageError(f"flavor {self.flavor!r} is not available for task {self.task!r}; choose from {allowed}")
        return self

    @property
    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(doc))

    def rmsg_config(self) -> rm.RmsgConfig:
        flavor = self.flavor if self.flavor != "average" else "mpnn"
        return rm.RmsgConfig(**{**self.model, **self.train, "flavor": flavor})

    def traffic_config(self) -> tf.TrafficConfig:
        train = dict(self.train)
        for key in ("ratios", "probes"):
            if key in train:
                train[key] = tuple(train[key])
        return tf.TrafficConfig(model=dict(self.model), **train)


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {dotted}: {k} is not a table")
    node[keys[-1]] = value


def resolve_config(args: argparse.Namespace, task: str | None = None) -> ExperimentConfig:
    """File fields first, then flags; ``--set a.b=v`` reaches nested fields."""
    doc = read_config_file(args.config) if getattr(args, "config", None) else {}
    if task is not None:
        doc["task"] = task
    for name in ("task", "flavor", "seed", "out"):
        v = getattr(args, name, None)
        if v is not None:
            doc[name] = v
    if getattr(args, "seeds", None):
        doc["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "plot", False):
        doc["plot"] = True
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_path(doc, key.strip(), parse_value(value))
    return ExperimentConfig.from_dict(doc).validate()


# ---------------------------------------------------------------------------
# Random search
# ---------------------------------------------------------------------------


@dataclass
class SearchSpace:
    """``params`` maps a dotted config path to ("loguniform", lo, hi), ("int", lo, hi) or ("choice", [...])."""

    params: dict[str, tuple]
    budget: int = 20

    def __post_init__(self):
        if self.budget < 1:
            raise UsageError("search budget must be at least 1")
        for name, spec in self.params.items():
            kind = spec[0]
            if kind == "loguniform":
                if not 0 < spec[1] < spec[2]:
                    raise UsageError(f"{name}: log-uniform range needs 0 < lo < hi")
            elif kind == "int":
                if spec[1] > spec[2]:
                    raise UsageError(f"{name}: empty integer range")
            elif kind == "choice":
                if not spec[1]:
                    raise UsageError(f"{name}: empty choice list")
            else:
                raise UsageError(f"{name}: unknown range kind {kind!r}")

    def sample(self, rng: np.random.Generator) -> dict[str, Any]:
        trial = {}
        for name in sorted(self.params):
            spec = self.params[name]
            if spec[0] == "loguniform":
                trial[name] = float(np.exp(rng.uniform(np.log(spec[1]), np.log(spec[2]))))
            elif spec[0] == "int":
                trial[name] = int(rng.integers(spec[1], spec[2] + 1))
            else:
                choices = list(spec[1])
                trial[name] = choices[int(rng.integers(len(choices)))]
        return trial

    def contains(self, trial: dict[str, Any]) -> bool:
        for name, spec in self.params.items():
            v = trial[name]
            if spec[0] == "loguniform" and not spec[1] <= v <= spec[2]:
                return False
            if spec[0] == "int" and not (spec[1] <= v <= spec[2] and int(v) == v):
                return False
            if spec[0] == "choice" and v not in spec[1]:
                return False
        return True

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        params = {k: tuple(v) if v[0] != "choice" else ("choice", list(v[1])) for k, v in doc.get("params", {}).items()}
        return cls(params, int(doc.get("budget", 20)))


def default_space(task: str, flavor: str, budget: int = 20) -> SearchSpace:
    params: dict[str, tuple] = {"train.lr": ("loguniform", 1e-4, 1e-2)}
    if task == "rmsg":
        params["model.width"] = ("int", 16, 128)
        params["model.hidden"] = ("int", 16, 128)
        if flavor == "mpnn":
            params["model.mpnn_hidden"] = ("int", 16, 128)
    else:
        params["model.residual"] = ("int", 16, 128)
        if flavor == "diffusion":
            params["model.hops"] = ("choice", [1, 2, 3])
        if flavor == "mpnn":
            params["model.mpnn_hidden"] = ("int", 16, 128)
    if flavor == "gat":
        params["model.heads"] = ("choice", [1, 2, 4, 8, 16])
    return SearchSpace(params, budget)


@dataclass
class Trial:
    index: int
    params: dict[str, Any]
    score: float = math.nan
    status: str = "ok"


def random_search(
    space: SearchSpace,
    objective: Callable[[dict[str, Any], int], float],
    seed: int,
    log_path: str | Path | None = None,
    workers: int = 1,
) -> tuple[Trial, list[Trial]]:
    """Exactly ``space.budget`` trials drawn up front from a seeded stream; lowest score wins."""
    rng = rng_for(seed, 53)
    trials = [Trial(i, space.sample(rng)) for i in range(space.budget)]
    lock = threading.Lock()

    def run(trial: Trial) -> Trial:
        try:
            score = float(objective(dict(trial.params), trial.index))
            if not math.isfinite(score):
                raise tg.NumericError(f"non-finite score {score}")
            trial.score = score
        except (tg.NumericError, tg.ContractError, FloatingPointError, ValueError) as exc:
            trial.status = f"failed: {exc}"
        with lock:
            log.info("trial %d %s score=%s %s", trial.index, trial.params, trial.score, trial.status)
        return trial

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, trials))
    else:
        for t in trials:
            run(t)
    if log_path is not None:
        write_trials(trials, log_path)
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SearchError("every trial failed", trials)
    best = min(ok, key=lambda t: (t.score, t.index))
    return best, trials


def write_trials(trials: Sequence[Trial], path: str | Path) -> None:
    names = sorted({k for t in trials for k in t.params})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial"] + names + ["score", "status"])
        for t in sorted(trials, key=lambda t: t.index):
            w.writerow([t.index] + [_fmt(t.params.get(k)) for k in names] + [_fmt(t.score), t.status])


def _fmt(v: Any) -> Any:
    return repr(v) if isinstance(v, float) else v


def apply_trial(cfg: ExperimentConfig, trial: dict[str, Any]) -> ExperimentConfig:
    doc = cfg.to_json()
    for key, value in trial.items():
        set_path(doc, key, value)
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def run_directory(cfg: ExperimentConfig, command: str) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return output_root() / f"{cfg.task}-{command}-{cfg.flavor}-seed{cfg.seed}"


def write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_csv_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        names = list(rows[0])
        for r in rows[1:]:
            names += [k for k in r if k not in names]
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


class _RunLog:
    def __init__(self, directory: Path):
        self.handler = logging.FileHandler(directory / "run.log", mode="w")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))

    def __enter__(self):
        root = logging.getLogger("gnnflavors")
        root.setLevel(logging.INFO)
        root.addHandler(self.handler)
        return self

    def __exit__(self, *exc):
        logging.getLogger("gnnflavors").removeHandler(self.handler)
        self.handler.close()


def execute(command: str, cfg: ExperimentConfig, body: Callable[[ExperimentConfig, Path], dict], config_path=None) -> int:
    """Run ``body`` inside a fresh run directory; returns the process exit code."""
    directory = run_directory(cfg, command)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in ("error.json",):
        (directory / stale).unlink(missing_ok=True)
    if config_path:
        shutil.copyfile(config_path, directory / f"source_config{Path(config_path).suffix}")
    write_json(directory / "config.json", cfg.to_json())
    with _RunLog(directory):
        log.info("command %s in %s", command, directory)
        try:
            summary = body(cfg, directory)
        except Exception as exc:  # reported as a machine-readable error file
            log.exception("command %s failed", command)
            write_json(
                directory / "error.json",
                {"command": command, "error": type(exc).__name__, "message": str(exc)},
            )
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
    failed = summary.get("failed") if isinstance(summary, dict) else None
    if failed:
        write_json(directory / "error.json", {"command": command, "error": "RunFailed", "message": str(failed)})
        print(f"error: {failed}", file=sys.stderr)
        return 1
    print(f"wrote {directory}")
    return 0


def plot_lines(path: Path, series: dict[str, tuple[Sequence, Sequence]], xlabel: str, ylabel: str, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# RMSG commands
# ---------------------------------------------------------------------------


def cmd_rmsg_run(cfg: ExperimentConfig, directory: Path) -> dict:
    rc = cfg.rmsg_config()
    if cfg.flavor == "average":
        rows = []
        for seed in cfg.seed_list:
            train = rm.RmsgSet.generate(rc.n_train, seed, rm.TRAIN)
            test = rm.RmsgSet.generate(rc.n_test, seed, rm.TEST)
            rows.append({"seed": seed, "flavor": "average", "n_params": 1, **rm.evaluate_average(train, test), "status": "ok"})
        write_csv_rows(directory / "metrics.csv", rows)
        agg = {k: float(np.mean([r[k] for r in rows])) for k in ("rmse", "mae", "r2")}
        write_json(directory / "metrics.json", {"flavor": "average", "runs": len(rows), "mean": agg, "rows": rows})
        return {}
    results = []
    for seed in cfg.seed_list:
        res = rm.train_rmsg(rc, seed)
        results.append(res)
        if res.row.status == "ok":
            res.model.save(directory / f"model-seed{seed}")
        log.info("seed %d: %s", seed, res.row)
    report = rm.RmsgRunReport(rc.flavor, [r.row for r in results])
    report.write(directory)
    if cfg.plot:
        plot_lines(
            directory / "training.svg",
            {f"seed {r.row.seed}": (list(range(1, len(r.history) + 1)), r.history) for r in results},
            "epoch",
            "train RMSE",
            f"RMSG {rc.flavor}",
        )
    failed = [r.row for r in results if r.row.status != "ok"]
    return {"failed": f"{len(failed)} run(s) failed" if len(failed) == len(results) else None}


def cmd_rmsg_sweep(cfg: ExperimentConfig, directory: Path) -> dict:
    base = cfg.rmsg_config()
    flavors = cfg.sweep.get("flavors") or [base.flavor]
    sizes = cfg.sweep.get("sizes") or list(DEFAULT_SIZES)
    rows, summary = [], {}
    for flavor in flavors:
        fl_rows = rm.size_sweep(flavor, sizes, cfg.seed_list, base)
        rows += fl_rows
        ok = [r for r in fl_rows if r["status"] == "ok"]
        small = [r["r2"] for r in ok if r["n_params"] <= 1000]
        summary[flavor] = {
            "best_r2": max((r["r2"] for r in ok), default=math.nan),
            "best_r2_at_most_1000_params": max(small, default=math.nan),
        }
    write_csv_rows(directory / "metrics.csv", rows)
    write_json(directory / "metrics.json", {"sizes": sizes, "summary": summary})
    if cfg.plot:
        series = {}
        for flavor in flavors:
            pts = sorted((r["n_params"], r["r2"]) for r in rows if r["flavor"] == flavor and r["status"] == "ok")
            series[flavor] = ([p for p, _ in pts], [v for _, v in pts])
        plot_lines(directory / "sweep.svg", series, "trainable parameters", "test R²", "RMSG model-size sweep")
    return {}


def cmd_rmsg_residuals(cfg: ExperimentConfig, directory: Path) -> dict:
    rc = cfg.rmsg_config()
    bins = int(cfg.sweep.get("bins", 20))
    summary = {}
    for seed in cfg.seed_list:
        data = rm.rmsg_data(rc, seed)
        res = rm.train_rmsg(rc, seed, data)
        if res.row.status != "ok":
            summary[str(seed)] = {"status": res.row.status}
            continue
        rep = rm.residual_analysis(data["test"].y, res.test_pred, bins=bins)
        sub = directory / f"seed{seed}"
        sub.mkdir(exist_ok=True)
        rep.write_csv(sub)
        summary[str(seed)] = {
            "status": "ok",
            "r2": res.row.r2,
            "max_abs_binned_residual": rep.max_abs_binned(),
            "lowest_bin_residual": float(rep.label_mean_residual[0]),
            "highest_bin_residual": float(rep.label_mean_residual[-1]),
            "binned_mean_residual": [None if np.isnan(v) else float(v) for v in rep.label_mean_residual],
        }
        if cfg.plot:
            mids = 0.5 * (rep.label_edges[:-1] + rep.label_edges[1:])
            keep = rep.label_counts > 0
            plot_lines(sub / "residuals.svg", {rc.flavor: (mids[keep], rep.label_mean_residual[keep])}, "label", "mean residual")
    write_json(directory / "metrics.json", {"flavor": rc.flavor, "seeds": summary})
    if all(v["status"] != "ok" for v in summary.values()):
        return {"failed": "every training run failed"}
    return {}


# ---------------------------------------------------------------------------
# Traffic commands
# ---------------------------------------------------------------------------


def traffic_data(cfg: ExperimentConfig) -> tuple[tf.TrafficTensor, np.ndarray]:
    """Dataset from ``data.values``/``data.adjacency`` or, absent those, the synthetic generator."""
    d = cfg.data
    if d.get("values") or d.get("adjacency"):
        if not (d.get("values") and d.get("adjacency")):
            raise UsageError("traffic data needs both data.values and data.adjacency")
        for key in ("values", "adjacency"):
            if not Path(d[key]).exists():
                raise tf.LoadError(f"data.{key}: {d[key]} does not exist")
        data, _ = tf.load_dataset(d["values"], d["adjacency"])
        from .graphs import load_adjacency_csv

        a = load_adjacency_csv(d["adjacency"])
    else:
        syn = d.get("synthetic", {})
        data, a = tf.synthetic_traffic(
            n_nodes=int(syn.get("n_nodes", 24)),
            days=int(syn.get("days", 14)),
            seed=int(syn.get("seed", 0)),
            missing_rate=float(syn.get("missing_rate", 0.05)),
            noise=float(syn.get("noise", 2.0)),
        )
    if d.get("nodes"):
        keep = list(range(int(d["nodes"]))) if isinstance(d["nodes"], int) else [int(i) for i in d["nodes"]]
        data = data.select_nodes(keep)
        a = a[np.ix_(keep, keep)]
    if d.get("steps"):
        data = data.slice_time(0, int(d["steps"]))
    return data, a


def _metrics_table(results: dict[str, dict], granularity: int) -> list[dict]:
    return [{"model": name, **tf.metrics_rows(m, granularity)} for name, m in results.items()]


def cmd_traffic_baselines(cfg: ExperimentConfig, directory: Path) -> dict:
    data, _ = traffic_data(cfg)
    tc = cfg.traffic_config()
    rep = tf.baseline_report(data, tc.window, tc.ratios)
    if cfg.flavor in ("copylast", "histavg"):
        rep = {cfg.flavor: rep[cfg.flavor]}
    gran = data.granularity or 5
    write_csv_rows(directory / "metrics.csv", _metrics_table(rep, gran))
    write_json(directory / "metrics.json", {k: {str(p): m for p, m in v.items()} for k, v in rep.items()})
    return {}


def cmd_traffic_train(cfg: ExperimentConfig, directory: Path) -> dict:
    if cfg.flavor not in ("diffusion", "gat", "mpnn"):
        raise UsageError(f"traffic train needs a WaveNet flavor, got {cfg.flavor!r}")
    data, a = traffic_data(cfg)
    tc = cfg.traffic_config()
    adj = AdjacencySet.from_adjacency(a)
    model, report, _ = tf.train_traffic(cfg.flavor, tc, cfg.seed, data, adj)
    if report.status != "ok":
        write_json(directory / "metrics.json", report.to_json())
        return {"failed": report.status}
    model.save(directory / "model")
    base = tf.baseline_report(data, tc.window, tc.ratios)
    gran = data.granularity or 5
    table = {cfg.flavor: report.test, "copylast": base["copylast"], "histavg": base["histavg"]}
    write_csv_rows(directory / "metrics.csv", _metrics_table(table, gran))
    doc = report.to_json()
    doc["baselines"] = {k: {str(p): m for p, m in v.items()} for k, v in base.items()}
    write_json(directory / "metrics.json", doc)
    if cfg.plot and report.history:
        steps = [h["step"] for h in report.history]
        plot_lines(
            directory / "training.svg",
            {"train MAE": (steps, [h["train_mae"] for h in report.history]), "val MAE": (steps, [h["val_mae"] for h in report.history])},
            "step",
            "MAE",
        )
    return {}


def cmd_traffic_eval(cfg: ExperimentConfig, directory: Path) -> dict:
    model_dir = cfg.data.get("model")
    if not model_dir:
        raise UsageError("traffic eval needs --model DIR (or data.model in the config)")
    if not Path(model_dir, "weights.json").exists():
        raise tf.LoadError(f"{model_dir} holds no saved model")
    data, a = traffic_data(cfg)
    model = WaveNet.load(model_dir)
    metrics = tf.evaluate_model(model, data, AdjacencySet.from_adjacency(a), cfg.traffic_config())
    write_csv_rows(directory / "metrics.csv", _metrics_table({model.config.flavor: metrics}, data.granularity or 5))
    write_json(directory / "metrics.json", {str(p): m for p, m in metrics.items()})
    return {}


# ---------------------------------------------------------------------------
# Tuning and gradient checks
# ---------------------------------------------------------------------------


def tuning_objective(cfg: ExperimentConfig) -> Callable[[dict[str, Any], int], float]:
    if cfg.task == "rmsg":
        if cfg.flavor == "average":
            raise UsageError("the average model has nothing to tune")
        shared = rm.rmsg_data(cfg.rmsg_config(), cfg.seed, test=False)

        def objective(trial, index):
            res = rm.train_rmsg(apply_trial(cfg, trial).rmsg_config(), cfg.seed, shared, evaluate_test=False)
            if res.row.status != "ok":
                raise tg.NumericError(res.row.status)
            return res.row.val_rmse

        return objective
    if cfg.flavor not in ("diffusion", "gat", "mpnn"):
        raise UsageError(f"cannot tune baseline {cfg.flavor!r}")
    data, a = traffic_data(cfg)
    adj = AdjacencySet.from_adjacency(a)

    def objective(trial, index):
        _, report, _ = tf.train_traffic(cfg.flavor, apply_trial(cfg, trial).traffic_config(), cfg.seed, data, adj)
        if report.status != "ok":
            raise tg.NumericError(report.status)
        return report.best_val_mae

    return objective


def cmd_tune(cfg: ExperimentConfig, directory: Path) -> dict:
    search = cfg.search
    space = SearchSpace.from_dict(search) if search.get("params") else default_space(cfg.task, cfg.flavor, int(search.get("budget", 20)))
    if search.get("budget") is not None:
        space.budget = int(search["budget"])
    objective = tuning_objective(cfg)

    def recorded(trial, index):
        sub = directory / "trials" / f"{index:03d}"
        sub.mkdir(parents=True, exist_ok=True)
        doc = {"trial": index, "params": trial}
        try:
            doc["score"] = objective(trial, index)
        except Exception as exc:
            doc["error"] = str(exc)
            raise
        finally:
            write_json(sub / "trial.json", doc)
        return doc["score"]

    best, trials = random_search(
        space, recorded, cfg.seed, directory / "trials.csv", workers=int(search.get("workers", 1))
    )
    best_cfg = apply_trial(cfg, best.params)
    best_cfg.out = None
    best_cfg.search = {}
    write_json(directory / "best_config.json", best_cfg.to_json())
    write_json(
        directory / "metrics.json",
        {"best": {"trial": best.index, "score": best.score, "params": best.params}, "budget": space.budget,
         "failed": sum(t.status != "ok" for t in trials)},
    )
    if cfg.plot:
        ok = [t for t in trials if t.status == "ok"]
        plot_lines(directory / "trials.svg", {"score": ([t.index for t in ok], [t.score for t in ok])}, "trial", "validation score")
    return {}


def cmd_gradcheck(cases: Sequence[str], trials: int, seed: int, directory: Path) -> dict:
    results = [checks.grad_suite(name, trials=trials, seed=seed) for name in cases]
    for r in results:
        print(r.line())
    write_json(directory / "metrics.json", {r.name: asdict(r) | {"passed": r.passed} for r in results})
    bad = [r.name for r in results if not r.passed]
    return {"failed": f"gradcheck above tolerance: {', '.join(bad)}" if bad else None}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, flavors: Sequence[str] | None) -> None:
    p.add_argument("--config", help="TOML or JSON experiment config")
    if flavors:
        p.add_argument("--flavor", choices=flavors)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds; overrides --seed for multi-seed commands")
    p.add_argument("--out", help=f"run directory (default: ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. model.width=8")
    p.add_argument("--plot", action="store_true", help="also write SVG charts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnnflavors", description="GNN flavor experiments: RMSG and traffic forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="group", required=True)

    rmsg = sub.add_parser("rmsg", help="synthetic node-interaction benchmark").add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "train and evaluate over seeds"), ("sweep", "model-size sweep"), ("residuals", "residual analysis")):
        _common(rmsg.add_parser(name, help=helptext), RMSG_CHOICES)

    traffic = sub.add_parser("traffic", help="traffic-speed forecasting").add_subparsers(dest="command", required=True)
    for name, helptext in (("baselines", "CopyLastSteps and HistoricalAverage"), ("train", "train a WaveNet"), ("eval", "evaluate a saved WaveNet")):
        p = traffic.add_parser(name, help=helptext)
        _common(p, TRAFFIC_CHOICES)
        p.add_argument("--values", help="values CSV (timestamp column + one column per node)")
        p.add_argument("--adjacency", help="dense adjacency CSV")
        if name == "eval":
            p.add_argument("--model", help="directory written by `traffic train`")

    tune = sub.add_parser("tune", help="random-search hyperparameter tuning")
    _common(tune, ALL_FLAVORS)
    tune.add_argument("--task", choices=TASKS)
    tune.add_argument("--budget", type=int)
    tune.add_argument("--values")
    tune.add_argument("--adjacency")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--all", action="store_true", help="check every registered layer")
    gc.add_argument("--case", action="append", choices=list(checks.GRAD_CASES))
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    return parser


def _data_flags(args: argparse.Namespace) -> list[str]:
    out = []
    for key in ("values", "adjacency", "model"):
        v = getattr(args, key, None)
        if v:
            out.append(f"data.{key}={json.dumps(v)}")
    if getattr(args, "budget", None) is not None:
        out.append(f"search.budget={args.budget}")
    return out


COMMANDS = {
    ("rmsg", "run"): cmd_rmsg_run,
    ("rmsg", "sweep"): cmd_rmsg_sweep,
    ("rmsg", "residuals"): cmd_rmsg_residuals,
    ("traffic", "baselines"): cmd_traffic_baselines,
    ("traffic", "train"): cmd_traffic_train,
    ("traffic", "eval"): cmd_traffic_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.group == "gradcheck":
        cases = list(checks.GRAD_CASES) if args.all or not args.case else args.case
        cfg = ExperimentConfig(task="rmsg", flavor="mpnn", seed=args.seed, out=args.out or str(output_root() / "gradcheck"))
        return execute("gradcheck", cfg, lambda c, d: cmd_gradcheck(cases, args.trials, args.seed, d))

    args.set = (args.set or []) + _data_flags(args)
    try:
        if args.group == "tune":
            cfg = resolve_config(args)
            body, name = cmd_tune, "tune"
        else:
            cfg = resolve_config(args, task=args.group)
            body, name = COMMANDS[(args.group, args.command)], f"{args.command}"
    except (UsageError, FileNotFoundError, ValueError, TypeError) as exc:
        parser.error(str(exc))
    return execute(name, cfg, body, config_path=args.config)


if __name__ == "__main__":
    sys.exit(main())
