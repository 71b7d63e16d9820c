"""Spectral comparison methods: PCA, graph-regularized PCA, MCCA and GMCCA.

All four return a common representation ``S`` of shape ``(d, n)`` with
orthonormal rows. MCCA/GMCCA solve

    min_{U_m, S}  sum_m ||U_m X_m - S||^2 + gamma * tr(S L S^T)   s.t. S S^T = I

whose minimizer has rows equal to the ``d`` leading eigenvectors of
``sum_m X_m^T (X_m X_m^T + eps_m I)^{-1} X_m - gamma L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .data import MultiviewDataset

DENSE_EIGEN_LIMIT = 5000
GAMMA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


@dataclass
class LinearEmbedding:
    S: np.ndarray
    d: int
    gamma: float = 0.0
    U: list[np.ndarray] | None = None
    eigenvalues: np.ndarray = field(default_factory=lambda: np.empty(0))
    method: str = ""

    @property
    def embedding(self) -> np.ndarray:
        """Sample-major view of ``S`` (shape ``(n, d)``) for downstream estimators."""
        return self.S.T


def _top_eigvecs(M, d, n):
    """Leading ``d`` eigenpairs of a symmetric matrix or ``LinearOperator``."""
    if n <= DENSE_EIGEN_LIMIT:
        if isinstance(M, spla.LinearOperator):
            M = M @ np.eye(n)
        M = np.asarray(M.toarray() if sp.issparse(M) else M)
        M = 0.5 * (M + M.T)
        vals, vecs = sla.eigh(M, subset_by_index=[n - d, n - 1])
    else:
        vals, vecs = spla.eigsh(M, k=d, which="LA")
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order].T


def _check_d(d, limit, what):
    if d < 1 or d > limit:
        raise ValueError(f"latent dimension d={d} must lie in [1, {limit}] ({what})")


def pca(dataset: MultiviewDataset, d: int) -> LinearEmbedding:
    """Top-``d`` principal component scores of the concatenated views, orthonormalized."""
    X = dataset.concatenated()
    _check_d(d, min(X.shape), "total feature dimension and n")
    X = X - X.mean(axis=1, keepdims=True)
    U, sv, Vt = np.linalg.svd(X, full_matrices=False)
    return LinearEmbedding(
        S=Vt[:d], d=d, U=[U[:, :d].T], eigenvalues=sv[:d] ** 2, method="pca"
    )


def graph_pca(dataset: MultiviewDataset, L, gamma: float, d: int) -> LinearEmbedding:
    """PCA scores penalized by graph roughness ``gamma * tr(S L S^T)``.

    The sample Gram matrix is scaled to unit spectral norm first so that
    ``gamma`` is comparable across datasets and with GMCCA's grid.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    X = dataset.concatenated()
    n = X.shape[1]
    _check_d(d, n, "sample count")
    X = X - X.mean(axis=1, keepdims=True)
    G = X.T @ X
    top = np.linalg.norm(X, 2) ** 2
    if top > 0:
        G /= top
    M = G - gamma * _dense(L)
    vals, S = _top_eigvecs(M, d, n)
    return LinearEmbedding(S=S, d=d, gamma=gamma, eigenvalues=vals, method="gpca")


def _dense(L):
    return L.toarray() if sp.issparse(L) else np.asarray(L, dtype=np.float64)


def view_ridges(dataset: MultiviewDataset, eps: float) -> list[float]:
    """Per-view ridge ``eps * tr(X_m X_m^T) / d_m``."""
    return [eps * float(np.sum(X * X)) / X.shape[0] for X in dataset.views]


def _hat_factors(dataset: MultiviewDataset, eps: float):
    """Return ``(V_m, w_m)`` with ``X_m^T (X_m X_m^T + r I)^{-1} X_m = V_m diag(w_m) V_m^T``."""
    factors = []
    for name, X, r in zip(dataset.names, dataset.views, view_ridges(dataset, eps)):
        _, sv, Vt = np.linalg.svd(X, full_matrices=False)
        s2 = sv**2
        if r == 0:
            tol = (sv[0] if sv.size else 0.0) * max(X.shape) * np.finfo(float).eps
            if sv.size == 0 or sv[-1] <= tol:
                raise np.linalg.LinAlgError(
                    f"Gram matrix of view {name!r} is singular; "
                    "use a positive eps ridge (e.g. 1e-6) to regularize it"
                )
            w = np.ones_like(s2)
        else:
            w = s2 / (s2 + r)
        factors.append((Vt.T, w))
    return factors


def mcca_matrix(dataset: MultiviewDataset, eps: float = 1e-6) -> np.ndarray:
    """Dense ``sum_m X_m^T (X_m X_m^T + eps_m I)^{-1} X_m``."""
    n = dataset.n
    C = np.zeros((n, n))
    for V, w in _hat_factors(dataset, eps):
        C += (V * w) @ V.T
    return C


def _operator(dataset, L, gamma, eps):
    n = dataset.n
    factors = _hat_factors(dataset, eps)
    if n <= DENSE_EIGEN_LIMIT:
        C = np.zeros((n, n))
        for V, w in factors:
            C += (V * w) @ V.T
        if gamma:
            C -= gamma * _dense(L)
        return C

    Ls = sp.csr_array(L) if gamma else None

    def matvec(x):
        x = np.asarray(x).reshape(n, -1)
        out = sum(V @ (w[:, None] * (V.T @ x)) for V, w in factors)
        if gamma:
            out = out - gamma * (Ls @ x)
        return out

    return spla.LinearOperator((n, n), matvec=matvec, matmat=matvec, dtype=np.float64)


def _recover_projectors(dataset, S, eps):
    Us = []
    for X, r in zip(dataset.views, view_ridges(dataset, eps)):
        G = X @ X.T + r * np.eye(X.shape[0])
        Us.append(np.linalg.solve(G, X @ S.T).T)
    return Us


def gmcca(dataset: MultiviewDataset, L, gamma: float, d: int, eps: float = 1e-6) -> LinearEmbedding:
    if dataset.n_views < 2:
        raise ValueError("multiview CCA needs at least two views")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    _check_d(d, dataset.n, "sample count")
    op = _operator(dataset, L, gamma, eps)
    vals, S = _top_eigvecs(op, d, dataset.n)
    return LinearEmbedding(
        S=S,
        d=d,
        gamma=gamma,
        U=_recover_projectors(dataset, S, eps),
        eigenvalues=vals,
        method="gmcca" if gamma else "mcca",
    )


def mcca(dataset: MultiviewDataset, d: int, eps: float = 1e-6) -> LinearEmbedding:
    return gmcca(dataset, None, 0.0, d, eps)


def cca_objective(dataset: MultiviewDataset, S, L=None, gamma=0.0, eps=1e-6) -> float:
    """Value of the (ridge-)regularized multiview objective at ``S``.

    Uses the per-view optimal ridge projectors, i.e. it is
    ``min_U sum_m (||U_m X_m - S||^2 + r_m ||U_m||^2) + gamma tr(S L S^T)``.
    """
    S = np.atleast_2d(S)
    total = 0.0
    Us = _recover_projectors(dataset, S, eps)
    for X, U, r in zip(dataset.views, Us, view_ridges(dataset, eps)):
        total += float(np.sum((U @ X - S) ** 2)) + r * float(np.sum(U * U))
    if gamma:
        total += gamma * float(np.trace(S @ (_dense(L) @ S.T)))
    return total
