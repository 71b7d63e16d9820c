import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvgcca.data import Adjacency, normalize_adjacency
from mvgcca.graph import batch_subgraph, krylov_features, laplacian, propagation_operator


def random_graph(seed, n):
    rng = np.random.default_rng(seed)
    W = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
    W = np.triu(W, 1)
    return normalize_adjacency(Adjacency(W + W.T))


def test_laplacian_single_edge():
    L = laplacian(Adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))).toarray()
    np.testing.assert_array_equal(L, [[1, -1], [-1, 1]])


def test_laplacian_empty():
    assert not laplacian(Adjacency(np.zeros((4, 4)))).toarray().any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_laplacian_properties(seed, n):
    A = random_graph(seed, n)
    L = laplacian(A).toarray()
    np.testing.assert_allclose(L, L.T)
    assert np.abs(L @ np.ones(n)).max() < 1e-9 * n
    assert np.linalg.eigvalsh(L).min() >= -1e-8


def test_propagation_identity():
    np.testing.assert_allclose(propagation_operator(Adjacency(np.eye(3))).toarray(), np.eye(3))


def test_propagation_two_nodes():
    P = propagation_operator(Adjacency(np.ones((2, 2)))).toarray()
    np.testing.assert_allclose(P, np.full((2, 2), 0.5))


def test_propagation_variants():
    A = random_graph(3, 6)
    W = A.toarray()
    deg = W.sum(1)
    np.testing.assert_allclose(propagation_operator(A, "rw").toarray(), W / deg[:, None])
    np.testing.assert_allclose(propagation_operator(A, "none").toarray(), W)
    sym = propagation_operator(A).toarray()
    np.testing.assert_allclose(sym, sym.T, atol=1e-15)
    with pytest.raises(ValueError):
        propagation_operator(A, "bogus")


def test_krylov_zero_hops(rng):
    X = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(krylov_features(X, random_graph(1, 5), 0), X)


def test_krylov_identity_graph(rng):
    X = rng.normal(size=(2, 4))
    out = krylov_features(X, Adjacency(np.eye(4)), 3)
    np.testing.assert_allclose(out, np.vstack([X] * 4))


def test_krylov_path_graph():
    A = normalize_adjacency(Adjacency(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0.0]])))
    # independent dense oracle: D^-1/2 A D^-1/2 with degrees (2, 3, 2)
    W = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1.0]])
    d = 1 / np.sqrt([2.0, 3.0, 2.0])
    P = d[:, None] * W * d[None, :]
    X = np.eye(3)
    out = krylov_features(X, A, 2)
    np.testing.assert_allclose(out[:3], X)
    np.testing.assert_allclose(out[3:6], (P @ X.T).T, atol=1e-14)
    np.testing.assert_allclose(out[6:], (np.linalg.matrix_power(P, 2) @ X.T).T, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 4))
def test_krylov_dense_power_oracle(seed, n, hops):
    A = random_graph(seed, n)
    X = np.random.default_rng(seed + 1).normal(size=(3, n))
    W = A.toarray()
    d = 1 / np.sqrt(W.sum(1))
    P = d[:, None] * W * d[None, :]
    out = krylov_features(X, A, hops)
    assert out.shape == ((hops + 1) * 3, n)
    for t in range(hops + 1):
        block = out[3 * t : 3 * (t + 1)]
        oracle = X @ np.linalg.matrix_power(P, t).T
        assert np.abs(block - oracle).max() < 1e-10


def test_krylov_mismatch(rng):
    with pytest.raises(ValueError, match="do not match"):
        krylov_features(rng.normal(size=(2, 3)), Adjacency(np.eye(4)), 1)


def test_subgraph_all_and_single():
    A = random_graph(5, 5)
    np.testing.assert_array_equal(batch_subgraph(A, range(5)).toarray(), A.toarray())
    np.testing.assert_array_equal(batch_subgraph(A, [3]).toarray(), [[1.0]])


def test_subgraph_triangle():
    W = np.array([[0, 0.3, 0.7], [0.3, 0, 0.2], [0.7, 0.2, 0]])
    A = normalize_adjacency(Adjacency(W))
    sub = batch_subgraph(A, [0, 2]).toarray()
    expected = A.toarray()[0, 2]
    np.testing.assert_allclose(sub, [[1, expected], [expected, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.data())
def test_subgraph_keeps_unit_diagonal(seed, n, data):
    A = random_graph(seed, n)
    idx = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n, unique=True))
    np.testing.assert_array_equal(np.diag(batch_subgraph(A, idx).toarray()), 1)


@pytest.mark.parametrize("idx", [[0, 0], [5], [-1]])
def test_subgraph_bad_indices(idx):
    with pytest.raises(ValueError):
        batch_subgraph(Adjacency(np.eye(3)), idx)
