"""Multiview dataset containers, loaders, preprocessing and graph construction.

Views are stored feature-major: view ``m`` is an array of shape ``(d_m, n)``
whose columns are samples. The shared graph is kept sparse so that the
batch-subgraph trainer never materializes an ``n x n`` dense matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.metrics import pairwise_distances

logger = logging.getLogger(__name__)

UCI_VIEWS = ("fou", "fac", "kar", "pix", "zer", "mor")
UCI_DIMS = (76, 216, 64, 240, 47, 6)
UCI_PER_CLASS = 200
UCI7_CLASSES = frozenset({1, 2, 3, 4, 7, 8, 9})
UCI10_CLASSES = frozenset(range(10))

TWITTER_VIEWS = (
    "EgoTweets",
    "MentionTweets",
    "FriendTweets",
    "FollowersTweets",
    "FriendNetwork",
    "FollowerNetwork",
)
TWITTER_GRAPH_VIEWS = ("EgoTweets", "FollowersTweets", "FriendNetwork")
TWITTER_DIM = 1000
_KNN_CHUNK = 1024


class DataLoadError(Exception):
    """Raised when a dataset directory is missing files or holds malformed data."""


@dataclass
class Adjacency:
    """Symmetric, nonnegative edge-weight matrix over the samples.

    ``weights`` may be given dense or sparse; it is stored as CSR.
    """

    weights: sp.csr_array

    def __post_init__(self):
        w = sp.csr_array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {w.shape}")
        w.sum_duplicates()
        if w.nnz and w.data.min() < 0:
            raise ValueError("adjacency weights must be nonnegative")
        if w.nnz and abs(w - w.T).max() > 1e-12:
            raise ValueError("adjacency must be symmetric")
        self.weights = w

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def toarray(self) -> np.ndarray:
        return self.weights.toarray()


@dataclass
class MultiviewDataset:
    views: list[np.ndarray]
    labels: np.ndarray | None = None
    adjacency: Adjacency | None = None
    names: list[str] = field(default_factory=list)
    ids: np.ndarray | None = None
    # (user_id, account_id) rows; Twitter side data for recommendation
    follower_edges: np.ndarray | None = None

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("a dataset needs at least one view")
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        ns = {v.shape[1] for v in self.views}
        if len(ns) != 1:
            raise ValueError(f"views disagree on sample count: {sorted(ns)}")
        if any(v.ndim != 2 or v.shape[0] < 1 for v in self.views):
            raise ValueError("every view must be a non-empty 2-D (d_m, n) array")
        if not self.names:
            self.names = [f"view{m}" for m in range(len(self.views))]
        if len(self.names) != len(self.views):
            raise ValueError("one name per view is required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.n,):
                raise ValueError(
                    f"labels must have {self.n} entries, got {self.labels.shape}"
                )
        if self.adjacency is not None and self.adjacency.n != self.n:
            raise ValueError("adjacency size does not match the sample count")
        if self.ids is None:
            self.ids = np.arange(self.n)

    @property
    def n(self) -> int:
        return self.views[0].shape[1]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(v.shape[0] for v in self.views)

    def concatenated(self, names=None) -> np.ndarray:
        """Row-stack the selected views into one ``(sum d_m, n)`` matrix."""
        if names is None:
            return np.vstack(self.views)
        lookup = dict(zip(self.names, self.views))
        missing = [nm for nm in names if nm not in lookup]
        if missing:
            raise ValueError(f"unknown view names: {missing}")
        return np.vstack([lookup[nm] for nm in names])

    def subset(self, index) -> "MultiviewDataset":
        index = np.asarray(index)
        adj = None
        if self.adjacency is not None:
            adj = Adjacency(self.adjacency.weights[index][:, index])
        return replace(
            self,
            views=[v[:, index] for v in self.views],
            labels=None if self.labels is None else self.labels[index],
            adjacency=adj,
            ids=self.ids[index],
        )


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: np.ndarray

    def folds(self):
        """Yield ``(train_index, test_index)`` pairs, one per fold."""
        for f in range(self.k):
            test = np.flatnonzero(self.assignments == f)
            train = np.flatnonzero(self.assignments != f)
            yield train, test


def _read_matrix(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as err:
                raise DataLoadError(f"{path}:{lineno}: non-numeric token ({err})") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataLoadError(f"{path}: ragged rows with widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def load_uci(data_dir, keep_classes=UCI10_CLASSES) -> MultiviewDataset:
    """Load the six UCI multiple-features digit views.

    Each file ``mfeat-<view>`` holds 2000 whitespace-separated rows, grouped
    in blocks of 200 per digit in order 0..9. Only the digits listed in
    ``keep_classes`` are kept; the adjacency is left empty.
    """
    data_dir = Path(data_dir)
    keep = sorted(int(c) for c in keep_classes)
    if not keep or keep[0] < 0 or keep[-1] > 9:
        raise ValueError(f"keep_classes must be digits 0-9, got {keep}")
    rows = np.concatenate(
        [np.arange(c * UCI_PER_CLASS, (c + 1) * UCI_PER_CLASS) for c in keep]
    )
    views = []
    for name, dim in zip(UCI_VIEWS, UCI_DIMS):
        path = data_dir / f"mfeat-{name}"
        if not path.exists():
            raise DataLoadError(f"missing UCI view file {path}")
        mat = _read_matrix(path)
        if mat.shape != (10 * UCI_PER_CLASS, dim):
            raise DataLoadError(
                f"{path}: expected shape {(10 * UCI_PER_CLASS, dim)}, got {mat.shape}"
            )
        views.append(mat[rows].T)
    labels = np.repeat(keep, UCI_PER_CLASS)
    return MultiviewDataset(views=views, labels=labels, names=list(UCI_VIEWS), ids=rows)


def load_twitter(data_dir, subsample=None, seed=0) -> MultiviewDataset:
    """Load the six-view Twitter user tables and the follower relation.

    Layout of ``data_dir``::

        user_ids.txt           one user id per line, n lines
        <View>.npy | <View>.txt  n rows x 1000 columns, rows aligned with user_ids
        follower_edges         "user_id account_id" per line

    ``subsample`` users are drawn uniformly without replacement using
    ``seed`` and returned in ascending original order.
    """
    data_dir = Path(data_dir)
    ids_path = data_dir / "user_ids.txt"
    edges_path = data_dir / "follower_edges"
    for p in (ids_path, edges_path):
        if not p.exists():
            raise DataLoadError(f"missing Twitter file {p}")
    ids = np.loadtxt(ids_path, dtype=np.int64, ndmin=1)
    n = ids.shape[0]
    if subsample is not None:
        if subsample > n:
            raise ValueError(f"subsample={subsample} exceeds the {n} available users")
        if subsample < 1:
            raise ValueError("subsample must be positive")
        rng = np.random.default_rng(seed)
        index = np.sort(rng.choice(n, size=subsample, replace=False))
    else:
        index = np.arange(n)

    views = []
    for name in TWITTER_VIEWS:
        candidates = [data_dir / f"{name}.npy", data_dir / f"{name}.txt"]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise DataLoadError(f"missing Twitter view {name} in {data_dir}")
        mat = _read_matrix(path)
        if mat.shape != (n, TWITTER_DIM):
            raise DataLoadError(
                f"{path}: expected shape {(n, TWITTER_DIM)}, got {mat.shape}"
            )
        views.append(mat[index].T)

    edges = np.loadtxt(edges_path, dtype=np.int64, ndmin=2)
    if edges.size and edges.shape[1] != 2:
        raise DataLoadError(f"{edges_path}: expected two columns per line")
    return MultiviewDataset(
        views=views,
        names=list(TWITTER_VIEWS),
        ids=ids[index],
        follower_edges=edges.reshape(-1, 2),
    )


def preprocess_views(dataset: MultiviewDataset) -> MultiviewDataset:
    """Center every feature over the samples, then scale each view by its max |entry|."""
    out = []
    for name, view in zip(dataset.names, dataset.views):
        centered = view - view.mean(axis=1, keepdims=True)
        peak = np.abs(centered).max()
        # centering a constant view leaves only rounding residue
        if peak <= 1e-12 * np.abs(view).max():
            warnings.warn(f"view {name!r} is constant; left centered but unscaled")
            out.append(np.zeros_like(view))
        else:
            out.append(centered / peak)
    return replace(dataset, views=out)


def build_knn_graph(dataset: MultiviewDataset, k=10, metric="euclidean", view_names=None) -> Adjacency:
    """Symmetric binary kNN graph on the concatenated views, without self-loops.

    Edge i-j exists when j is among the k nearest of i or vice versa. Ties in
    distance are broken by ascending sample index.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    n = dataset.n
    if k >= n:
        raise ValueError(f"k={k} must be smaller than n={n}")
    X = dataset.concatenated(view_names).T
    rows, cols = [], []
    for lo in range(0, n, _KNN_CHUNK):
        block = pairwise_distances(X[lo : lo + _KNN_CHUNK], X, metric=metric)
        local = np.arange(block.shape[0])
        block[local, lo + local] = np.inf
        # stable sort keeps ascending index order among equal distances
        nearest = np.argsort(block, axis=1, kind="stable")[:, :k]
        rows.append(np.repeat(lo + local, k))
        cols.append(nearest.ravel())
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    W = sp.coo_array((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    W = ((W + W.T) > 0).astype(np.float64)
    return Adjacency(W)


def normalize_adjacency(A: Adjacency) -> Adjacency:
    """Divide by the largest weight, then put ones on the diagonal."""
    W = A.weights.copy()
    peak = W.max() if W.nnz else 0.0
    if peak > 0:
        W = W / peak
    W = sp.lil_array(W)
    W.setdiag(1.0)
    return Adjacency(W.tocsr())


def split_folds(n, k, seed=0) -> FoldSplit:
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, k)):
        assignments[chunk] = f
    return FoldSplit(k=k, assignments=assignments)
