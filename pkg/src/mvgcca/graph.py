"""Graph quantities shared by the spectral baselines and the variational model."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .data import Adjacency

PROPAGATIONS = ("none", "sym", "rw")


def laplacian(A: Adjacency) -> sp.csr_array:
    """Combinatorial Laplacian ``D - W`` with ``D`` the weighted degree matrix."""
    W = A.weights
    deg = np.asarray(W.sum(axis=1)).ravel()
    return sp.csr_array(sp.diags_array(deg) - W)


def propagation_operator(A: Adjacency, kind: str = "sym") -> sp.csr_array:
    """Propagation matrix used by the Krylov layers.

    ``sym`` is ``D^-1/2 A D^-1/2``, ``rw`` is ``D^-1 A`` and ``none`` returns A.
    Self-loops are expected to be present already (unit diagonal).
    """
    if kind not in PROPAGATIONS:
        raise ValueError(f"unknown propagation {kind!r}; choose from {PROPAGATIONS}")
    W = A.weights
    if kind == "none":
        return W.copy()
    deg = np.asarray(W.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise ValueError("propagation requires every node to have positive degree")
    if kind == "rw":
        return sp.csr_array(sp.diags_array(1.0 / deg) @ W)
    dinv = sp.diags_array(1.0 / np.sqrt(deg))
    return sp.csr_array(dinv @ W @ dinv)


def krylov_features(X, A_sub, hops: int, kind: str = "sym") -> np.ndarray:
    """Stack ``[X; PX; P^2 X; ...; P^hops X]`` for a feature-major view ``X``.

    ``X`` has shape ``(d_m, batch)``; the result has ``(hops + 1) * d_m`` rows.
    Powers are applied by repeated multiplication.
    """
    X = np.asarray(X, dtype=np.float64)
    if hops < 0:
        raise ValueError("hops must be nonnegative")
    if not isinstance(A_sub, Adjacency):
        A_sub = Adjacency(A_sub)
    if X.ndim != 2 or X.shape[1] != A_sub.n:
        raise ValueError(
            f"feature columns ({X.shape[-1]}) do not match graph size ({A_sub.n})"
        )
    P = propagation_operator(A_sub, kind)
    blocks = [X]
    # P is symmetric for "sym"/"none"; rows of X.T are nodes
    H = X.T
    for _ in range(hops):
        H = P @ H
        blocks.append(H.T)
    return np.vstack(blocks)


def batch_subgraph(A: Adjacency, indices) -> Adjacency:
    """Restrict ``A`` to the rows and columns in ``indices`` (order preserved)."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= A.n):
        raise ValueError(f"indices out of range for a graph with {A.n} nodes")
    if np.unique(idx).size != idx.size:
        raise ValueError("batch indices must be distinct")
    return Adjacency(A.weights[idx][:, idx])
