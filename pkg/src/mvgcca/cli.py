"""Experiment driver: load, preprocess, build the graph, fit a method, evaluate.

A run is described by a YAML file whose keys mirror ``ExperimentConfig``;
command-line flags override individual fields. Example::

    dataset: uci7
    method: mvgcca
    task: all
    data_dir: data/uci
    out: runs/uci7
    latent_dim: 3
    graph: {k: 10, metric: euclidean}
    train: {hidden: 256, epochs: 100, learning_rate: 0.001, dropout: 0.2}

A grid file maps dotted field names to lists of values, e.g.
``{"train.dropout": [0.2, 0.5], "gamma": [0.1, 1.0]}``; points are the
cartesian product in file order.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import baselines, evaluation
from .data import (
    DataLoadError,
    MultiviewDataset,
    UCI7_CLASSES,
    UCI10_CLASSES,
    build_knn_graph,
    load_twitter,
    load_uci,
    normalize_adjacency,
    preprocess_views,
    split_folds,
    TWITTER_GRAPH_VIEWS,
)
from .graph import laplacian
from .model import TrainConfig, TrainingFault, embed, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

DATASETS = ("uci7", "uci10", "twitter")
METHODS = ("pca", "gpca", "mcca", "gmcca", "mvgcca")
TASKS = ("classify", "cluster", "recommend", "all")
RUNS_PER_POINT = 3


class UsageError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class GraphConfig:
    k: int = 10
    metric: str = "euclidean"


@dataclass
class EvalConfig:
    folds: int = 10
    fold_seed: int = 0
    # None tunes C over evaluation.SVM_C_GRID
    svm_c: float | None = None
    kmeans_runs: int = 10
    kmeans_restarts: int = 10
    spectral_neighbors: int = 10


@dataclass
class ExperimentConfig:
    dataset: str = "uci7"
    method: str = "pca"
    task: str = "classify"
    data_dir: str = "data/uci"
    out: str = "runs/experiment"
    seed: int = 0
    latent_dim: int = 3
    gamma: float = 1.0
    eps: float = 1e-6
    twitter_subsample: int | None = None
    graph: GraphConfig = field(default_factory=GraphConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        for name, allowed in (("dataset", DATASETS), ("method", METHODS), ("task", TASKS)):
            value = getattr(self, name)
            if value not in allowed:
                raise UsageError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")
        if self.task == "recommend" and self.dataset != "twitter":
            raise UsageError("task 'recommend' requires dataset 'twitter'")
        if self.latent_dim < 1:
            raise UsageError("latent_dim must be positive")
        if self.gamma < 0 or self.eps < 0:
            raise UsageError("gamma and eps must be nonnegative")
        if self.graph.k < 1:
            raise UsageError("graph.k must be positive")
        return self

    def resolved(self) -> dict:
        """Plain-dict form with the model's latent size tied to ``latent_dim``."""
        out = asdict(self)
        out["train"]["latent_dim"] = self.latent_dim
        out["train"]["seed"] = self.seed
        out["train"]["adam_betas"] = list(out["train"]["adam_betas"])
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**asdict(self.train), "latent_dim": self.latent_dim, "seed": self.seed})

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            graph = GraphConfig(**data.pop("graph", {}) or {})
            ev = EvalConfig(**data.pop("evaluation", {}) or {})
            tr = TrainConfig.from_dict(data.pop("train", {}) or {})
        except (TypeError, ValueError) as err:
            raise UsageError(str(err)) from None
        return cls(graph=graph, evaluation=ev, train=tr, **data)


def set_field(config: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Return a copy with ``dotted`` (e.g. ``train.dropout``) replaced."""
    data = config.resolved()
    node = data
    *parents, leaf = dotted.split(".")
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config field {dotted!r}")
        node = node[p]
    if leaf not in node:
        raise UsageError(f"unknown config field {dotted!r}")
    node[leaf] = value
    return ExperimentConfig.from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    return ExperimentConfig.from_dict(yaml.safe_load(path.read_text()))


# ---------------------------------------------------------------- pipeline


def load_dataset(config: ExperimentConfig) -> MultiviewDataset:
    if config.dataset == "twitter":
        ds = load_twitter(config.data_dir, subsample=config.twitter_subsample, seed=config.seed)
        view_names = list(TWITTER_GRAPH_VIEWS)
    else:
        keep = UCI7_CLASSES if config.dataset == "uci7" else UCI10_CLASSES
        ds = load_uci(config.data_dir, keep_classes=keep)
        view_names = None
    ds = preprocess_views(ds)
    ds.adjacency = normalize_adjacency(
        build_knn_graph(ds, k=config.graph.k, metric=config.graph.metric, view_names=view_names)
    )
    return ds


def fit_embedding(config: ExperimentConfig, ds: MultiviewDataset, out: Path | None = None):
    """Return the ``(d, n)`` embedding; mvgcca also writes checkpoint and epoch log."""
    d = config.latent_dim
    if config.method == "pca":
        return baselines.pca(ds, d).S
    if config.method == "mcca":
        return baselines.mcca(ds, d, eps=config.eps).S
    L = laplacian(ds.adjacency)
    if config.method == "gpca":
        return baselines.graph_pca(ds, L, config.gamma, d).S
    if config.method == "gmcca":
        return baselines.gmcca(ds, L, config.gamma, d, eps=config.eps).S
    tc = config.train_config()
    model, log = train(ds, tc)
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", model, names=ds.names, extra={"experiment": config.resolved()})
        with open(out / "epochs.tsv", "w") as fh:
            fh.write("# config: " + json.dumps(config.resolved(), sort_keys=True) + "\n")
            fh.write("epoch\telbo\tlink\treconstruction\tkl\n")
            for r in log:
                fh.write(f"{r['epoch']}\t{r['elbo']:.6f}\t{r['link']:.6f}\t{r['reconstruction']:.6f}\t{r['kl']:.6f}\n")
    return embed(model, ds, mode=tc.embed_mode)


def evaluate(config: ExperimentConfig, ds: MultiviewDataset, Z) -> evaluation.EvalReport:
    report = evaluation.EvalReport(
        meta={"method": config.method, "dataset": config.dataset, "seed": config.seed,
              "config": config.resolved()}
    )
    ev = config.evaluation
    task = config.task
    if task in ("classify", "all") and ds.labels is not None:
        folds = split_folds(ds.n, ev.folds, seed=ev.fold_seed)
        if ev.svm_c is None:
            C, mean, std = evaluation.tune_svm(Z, ds.labels, folds)
        else:
            C = ev.svm_c
            mean, std = evaluation.svm_accuracy_10fold(Z, ds.labels, folds, {"C": C})
        report.add("accuracy", mean, std)
        report.meta["svm_c"] = C
    if task in ("cluster", "all") and ds.labels is not None:
        k = len(np.unique(ds.labels))
        report.add("ari", *evaluation.kmeans_ari(Z, ds.labels, k, restarts=ev.kmeans_restarts,
                                                 seed=config.seed, runs=ev.kmeans_runs))
        report.add("ari2", *evaluation.spectral_ari(Z, ds.labels, k, n_neighbors=ev.spectral_neighbors,
                                                    seed=config.seed, runs=ev.kmeans_runs,
                                                    restarts=ev.kmeans_restarts))
    if task in ("recommend", "all") and ds.follower_edges is not None:
        rec = evaluation.RecommendationTask.from_edges(ds.ids, ds.follower_edges)
        p, r, mrr = evaluation.recommend_friends(Z, rec, seed=config.seed)
        report.add("precision", p)
        report.add("recall", r)
        report.add("mrr", mrr)
    return report


def write_report(report: evaluation.EvalReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_records_text())
    (out / "report.txt").write_text(report.to_table())


def run_experiment(config: ExperimentConfig, write=True, dataset=None) -> evaluation.EvalReport:
    """Full pipeline for one configuration. ``dataset`` skips loading when given."""
    config.validate()
    out = Path(config.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_dataset(config)
    Z = fit_embedding(config, ds, out if write else None)
    report = evaluate(config, ds, Z)
    if write:
        write_report(report, out)
    return report


def grid_points(grid: dict):
    if not grid:
        raise UsageError("grid must name at least one field")
    keys = list(grid)
    values = []
    for k in keys:
        v = grid[k]
        v = v if isinstance(v, list) else [v]
        if not v:
            raise UsageError(f"grid field {k!r} has no values")
        values.append(v)
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


@dataclass
class GridResult:
    best_config: ExperimentConfig
    best_report: evaluation.EvalReport
    points: list  # dicts: index, params, status, metrics (mean over runs), error
    best_index: int


def grid_search(config: ExperimentConfig, grid: dict, runs_per_point=RUNS_PER_POINT,
                dataset=None, write=True) -> GridResult:
    """Evaluate every grid point with ``runs_per_point`` seeds and keep the best.

    Selection is by mean SVM accuracy over the runs; ties keep the earlier
    point. A point whose runs raise is recorded as failed. The first run of
    each point uses the base seed, so it doubles as the winner's report; with
    ``write`` the winner is re-run once to produce its output files.
    """
    config.validate()
    points = grid_points(grid)
    cfgs = [config]
    for params in points:
        c = config
        for k, v in params.items():
            c = set_field(c, k, v)
        cfgs.append(c.validate())
    cfgs = cfgs[1:]
    if dataset is None:
        # graph and preprocessing do not depend on the training fields
        needs_reload = any(k.startswith("graph.") or k in ("dataset", "data_dir") for k in grid)
        dataset = None if needs_reload else load_dataset(config)

    results = []
    best = None
    for i, (params, cfg) in enumerate(zip(points, cfgs)):
        entry = {"index": i, "params": params, "status": "ok", "metrics": {}, "error": ""}
        try:
            ds = dataset if dataset is not None else load_dataset(cfg)
            runs = []
            for r in range(runs_per_point):
                rc = set_field(cfg, "seed", cfg.seed + r)
                runs.append(run_experiment(rc, write=False, dataset=ds))
            names = runs[0].metrics
            entry["metrics"] = {
                m: (float(np.mean([rep.metrics[m][0] for rep in runs])),
                    float(np.std([rep.metrics[m][0] for rep in runs])))
                for m in names
            }
            entry["per_seed_accuracy"] = [rep.metrics.get("accuracy", (np.nan,))[0] for rep in runs]
            entry["report"] = runs[0]
        except (TrainingFault, ValueError, np.linalg.LinAlgError, DataLoadError) as err:
            entry["status"] = "failed"
            entry["error"] = f"{type(err).__name__}: {err}"
            logger.warning("grid point %d failed: %s", i, entry["error"])
        results.append(entry)
        if entry["status"] == "ok":
            acc = entry["metrics"].get("accuracy", (-np.inf, 0))[0]
            if best is None or acc > best[1]:
                best = (i, acc)
    if best is None:
        raise UsageError("every grid point failed")
    best_cfg = cfgs[best[0]]
    if write:
        best_report = run_experiment(best_cfg, write=True, dataset=dataset)
        write_grid_summary(results, best[0], Path(config.out))
    else:
        best_report = results[best[0]]["report"]
    return GridResult(best_cfg, best_report, results, best[0])


def write_grid_summary(results, best_index, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.tsv", "w") as fh:
        fh.write(f"# best point: {best_index}\n")
        fh.write("index\tstatus\tparams\taccuracy_mean\taccuracy_std\terror\n")
        for e in results:
            mean, std = e["metrics"].get("accuracy", (float("nan"), float("nan")))
            fh.write(f"{e['index']}\t{e['status']}\t{json.dumps(e['params'], sort_keys=True)}\t"
                     f"{mean:.6f}\t{std:.6f}\t{e['error']}\n")


def export_embedding(config: ExperimentConfig, checkpoint, out_path, dataset=None) -> Path:
    """Write the checkpoint's embedding as ``id label z_1 .. z_d`` rows (TSV)."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist")
    model, payload = load_checkpoint(checkpoint)
    expected = config.train_config().to_dict()
    for key, value in payload["config"].items():
        mine = expected.get(key)
        if isinstance(value, (list, tuple)):
            value, mine = list(value), list(mine)
        if key != "epochs" and mine != value:
            raise UsageError(f"checkpoint/config mismatch in field {key!r}: {value!r} vs {mine!r}")
    ds = dataset if dataset is not None else load_dataset(config)
    if tuple(model.dims) != ds.dims:
        raise UsageError(f"checkpoint/config mismatch in field 'dims': {tuple(model.dims)} vs {ds.dims}")
    Z = embed(model, ds, mode=config.train.embed_mode)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    labels = ds.labels if ds.labels is not None else np.full(ds.n, -1)
    with open(out_path, "w") as fh:
        fh.write("# config: " + json.dumps(config.resolved(), sort_keys=True) + "\n")
        fh.write("id\tlabel\t" + "\t".join(f"z{j + 1}" for j in range(Z.shape[0])) + "\n")
        for i in range(ds.n):
            vals = "\t".join(repr(float(v)) for v in Z[:, i])
            fh.write(f"{ds.ids[i]}\t{labels[i]}\t{vals}\n")
    return out_path


def read_embedding(path):
    """Inverse of ``export_embedding``: returns ``(ids, labels, Z)`` with ``Z`` of shape (d, n)."""
    rows = np.loadtxt(path, comments="#", skiprows=2, ndmin=2)
    return rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64), rows[:, 2:].T.copy()


# ---------------------------------------------------------------- argv


_OVERRIDES = {
    "dataset": "dataset",
    "method": "method",
    "task": "task",
    "data_dir": "data_dir",
    "out": "out",
    "seed": "seed",
    "latent_dim": "latent_dim",
    "gamma": "gamma",
    "knn_k": "graph.k",
    "epochs": "train.epochs",
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "dropout": "train.dropout",
}


def build_parser():
    p = argparse.ArgumentParser(prog="mvgcca", description=__doc__.split("\n")[0])
    p.add_argument("command", nargs="?", default="run", choices=("run", "export"))
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data-dir")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--knn-k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--grid", help="YAML file mapping config fields to value lists")
    p.add_argument("--checkpoint", help="checkpoint to export (export command)")
    p.add_argument("--embedding-out", help="output file for export (default <out>/embedding.tsv)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    for attr, dotted in _OVERRIDES.items():
        value = getattr(args, attr)
        if value is not None:
            config = set_field(config, dotted, value)
    return config.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "export":
            if not args.checkpoint:
                raise UsageError("export needs --checkpoint")
            dest = args.embedding_out or str(Path(config.out) / "embedding.tsv")
            print(export_embedding(config, args.checkpoint, dest))
            return 0
        if args.grid:
            grid_path = Path(args.grid)
            if not grid_path.exists():
                raise UsageError(f"grid file {grid_path} not found")
            result = grid_search(config, yaml.safe_load(grid_path.read_text()))
            report = result.best_report
        else:
            report = run_experiment(config)
        sys.stdout.write(report.to_table())
        return 0
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DataLoadError, FileNotFoundError) as err:
        print(f"load error: {err}", file=sys.stderr)
        return 3
    except TrainingFault as err:
        print(f"training failed: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
