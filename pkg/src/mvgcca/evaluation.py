"""Downstream metrics: SVM accuracy, k-means / spectral ARI, friend recommendation.

Embeddings are passed feature-major, ``Z`` of shape ``(d, n)``, matching the
``S`` convention of the baselines and the model's ``embed``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from math import comb

import numpy as np
from sklearn.cluster import KMeans
from sklearn.manifold import spectral_embedding
from sklearn.model_selection import StratifiedKFold
from sklearn.neighbors import kneighbors_graph
from sklearn.svm import SVC

from .data import FoldSplit

logger = logging.getLogger(__name__)

SVM_C_GRID = (0.1, 1.0, 10.0, 100.0)

_RANGES = {
    "accuracy": (0.0, 1.0),
    "ari": (-1.0, 1.0),
    "ari2": (-1.0, 1.0),
    "precision": (0.0, 1.0),
    "recall": (0.0, 1.0),
    "mrr": (0.0, 1.0),
}


@dataclass
class EvalReport:
    """Named metrics as ``(mean, std)`` plus run metadata."""

    metrics: dict[str, tuple[float, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name, mean, std=0.0):
        lo, hi = _RANGES.get(name, (-np.inf, np.inf))
        if not lo - 1e-12 <= mean <= hi + 1e-12:
            raise ValueError(f"{name}={mean} outside [{lo}, {hi}]")
        self.metrics[name] = (float(mean), float(std))

    def records(self):
        return [
            {
                "method": self.meta.get("method", ""),
                "dataset": self.meta.get("dataset", ""),
                "metric": name,
                "mean": f"{mean:.6f}",
                "std": f"{std:.6f}",
                "seed": self.meta.get("seed", ""),
            }
            for name, (mean, std) in self.metrics.items()
        ]

    def to_records_text(self) -> str:
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(self.meta.get("config", {}), sort_keys=True) + "\n")
        writer = csv.DictWriter(
            buf,
            fieldnames=["method", "dataset", "metric", "mean", "std", "seed"],
            delimiter="\t",
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(self.records())
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{self.meta.get('method', '?')} on {self.meta.get('dataset', '?')} (seed {self.meta.get('seed', '?')})"
        lines = [head, "-" * len(head)]
        for name, (mean, std) in self.metrics.items():
            lines.append(f"{name:<10} {mean:.4f} +/- {std:.4f}")
        return "\n".join(lines) + "\n"


def _samples(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError("embedding must be a 2-D (d, n) array")
    return Z.T


def _global_scale(X):
    # one scalar for all coordinates keeps rotations of Z harmless
    rms = np.sqrt(np.mean(np.sum(X * X, axis=1)))
    return X / rms if rms > 0 else X


def svm_accuracy_10fold(Z, labels, folds: FoldSplit, svm_params=None):
    """Cross-validated accuracy of a linear maximum-margin classifier.

    If some fold's training part misses a class, the split is replaced by a
    stratified split with the same fold count (seed 0) and a warning.
    """
    params = {"C": 1.0, **(svm_params or {})}
    X = _global_scale(_samples(Z))
    y = np.asarray(labels)
    if X.shape[0] != y.shape[0] or folds.assignments.shape[0] != y.shape[0]:
        raise ValueError("embedding, labels and folds disagree on n")
    classes = set(np.unique(y))
    splits = list(folds.folds())
    if any(set(np.unique(y[tr])) != classes for tr, _ in splits):
        warnings.warn("a class is missing from some training folds; using stratified folds")
        skf = StratifiedKFold(n_splits=folds.k, shuffle=True, random_state=0)
        splits = list(skf.split(X, y))
    scores = []
    for train, test in splits:
        clf = SVC(kernel="linear", C=params["C"])
        clf.fit(X[train], y[train])
        scores.append(float(np.mean(clf.predict(X[test]) == y[test])))
    return float(np.mean(scores)), float(np.std(scores))


def tune_svm(Z, labels, folds: FoldSplit, c_grid=SVM_C_GRID):
    """Pick ``C`` by mean fold accuracy; ties keep the earlier grid value."""
    best = None
    for C in c_grid:
        mean, std = svm_accuracy_10fold(Z, labels, folds, {"C": C})
        if best is None or mean > best[1]:
            best = (C, mean, std)
    return best


def adjusted_rand_index(pred, true) -> float:
    """Pair-counting Rand index corrected for chance."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("label vectors must have equal length")
    n = pred.shape[0]
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(true, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    index = sum(comb(int(v), 2) for v in table.ravel())
    a = sum(comb(int(v), 2) for v in table.sum(axis=1))
    b = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = a * b / total if total else 0.0
    top = 0.5 * (a + b)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def kmeans_ari(Z, labels, n_clusters, restarts=10, seed=0, runs=10):
    """ARI of k-means (k-means++ seeding, best of ``restarts``) over ``runs`` seeds."""
    X = _samples(Z)
    scores = []
    for r in range(runs):
        km = KMeans(n_clusters=n_clusters, n_init=restarts, random_state=seed + r)
        scores.append(adjusted_rand_index(km.fit_predict(X), labels))
    return float(np.mean(scores)), float(np.std(scores))


def spectral_ari(Z, labels, n_clusters, n_neighbors=10, seed=0, runs=10, restarts=10):
    """ARI of spectral clustering on a kNN affinity of the embedding.

    The affinity is the symmetrized connectivity graph; the normalized
    Laplacian embedding to ``n_clusters`` dimensions is clustered with
    k-means. On a disconnected affinity each component's indicator is an
    eigenvector, so components are separated before any finer split.
    """
    X = _samples(Z)
    conn = kneighbors_graph(X, n_neighbors=n_neighbors, include_self=True)
    affinity = 0.5 * (conn + conn.T)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Graph is not fully connected")
        maps = spectral_embedding(
            affinity, n_components=n_clusters, drop_first=False, random_state=seed
        )
    scores = []
    for r in range(runs):
        km = KMeans(n_clusters=n_clusters, n_init=restarts, random_state=seed + r)
        scores.append(adjusted_rand_index(km.fit_predict(maps), labels))
    return float(np.mean(scores)), float(np.std(scores))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        warnings.warn("cosine similarity with a zero vector is taken as 0")
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class RecommendationTask:
    """Followers (as embedding column indices) of the most-followed accounts."""

    followers: dict[int, np.ndarray]
    accounts: list[int]
    seeds_per_account: int = 10
    shortlist: int = 100

    @classmethod
    def from_edges(cls, user_ids, edges, n_accounts=20, seeds_per_account=10, shortlist=100):
        """Rank accounts by follower count over all of ``edges`` and keep the top ones.

        Follower lists are restricted to the users present in ``user_ids``.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        counts = Counter(edges[:, 1].tolist())
        accounts = [a for a, _ in sorted(counts.items(), key=lambda t: (-t[1], t[0]))]
        accounts = accounts[:n_accounts]
        position = {int(u): i for i, u in enumerate(np.asarray(user_ids))}
        followers = {}
        for a in accounts:
            users = edges[edges[:, 1] == a, 0]
            idx = sorted({position[int(u)] for u in users if int(u) in position})
            followers[a] = np.asarray(idx, dtype=np.int64)
        return cls(followers, accounts, seeds_per_account, shortlist)


def recommend_friends(Z, task: RecommendationTask, seed=0):
    """Mean precision@L, recall@L and reciprocal rank over the task's accounts.

    For each account, ``seeds_per_account`` random followers are averaged
    into a profile; every other user is ranked by cosine similarity to it.
    Reciprocal rank is 0 when no true follower reaches the shortlist.
    """
    X = _samples(Z)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    unit = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    rng = np.random.default_rng(seed)
    precision, recall, rr = [], [], []
    for account in task.accounts:
        fol = task.followers[account]
        if fol.size < task.seeds_per_account:
            warnings.warn(
                f"account {account} has {fol.size} followers (< {task.seeds_per_account}); skipped"
            )
            continue
        seeds = rng.choice(fol, size=task.seeds_per_account, replace=False)
        profile = X[seeds].mean(axis=0)
        pn = np.linalg.norm(profile)
        sims = unit @ (profile / pn) if pn > 0 else np.zeros(X.shape[0])
        sims[seeds] = -np.inf
        ranking = np.argsort(-sims, kind="stable")[: task.shortlist]
        truth = np.zeros(X.shape[0], dtype=bool)
        truth[fol] = True
        truth[seeds] = False
        hits = truth[ranking]
        precision.append(hits.sum() / task.shortlist)
        recall.append(hits.sum() / truth.sum() if truth.sum() else 0.0)
        first = np.flatnonzero(hits)
        rr.append(1.0 / (first[0] + 1) if first.size else 0.0)
    if not precision:
        raise ValueError("no account has enough followers to evaluate")
    return float(np.mean(precision)), float(np.mean(recall)), float(np.mean(rr))
