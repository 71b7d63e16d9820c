"""Variational graph multiview CCA with spectral baselines and evaluation protocols."""

from .data import (
    Adjacency,
    DataLoadError,
    FoldSplit,
    MultiviewDataset,
    build_knn_graph,
    load_twitter,
    load_uci,
    normalize_adjacency,
    preprocess_views,
    split_folds,
)
from .model import MVGCCA, TrainConfig, embed, train

__version__ = "0.1.0"
