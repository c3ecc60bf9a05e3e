import itertools

import networkx as nx
import numpy as np
import pytest

from ecmp.errors import NotChordal, NotPositiveDefinite, ValidationError
from ecmp.sparse import (Permutation, SparseSym, amd_order, bandwidth, cholesky_solve, chordal_complete,
                         clique_decomposition, fill_in, is_chordal, numeric_cholesky, rcm_order,
                         read_matrix_market, solve_triangular, symbolic_cholesky,
                         takahashi_selected_inverse, write_matrix_market)

from conftest import grid_structure, laplacian_plus_identity, random_sparse_pd


def brute_fill(S, order):
    """Fill count by explicit graph elimination (independent of the etree code)."""
    adj = S.adjacency()
    pos = {v: k for k, v in enumerate(order)}
    fill = 0
    for v in order:
        later = [u for u in adj[v] if pos[u] > pos[v]]
        for a, b in itertools.combinations(later, 2):
            if b not in adj[a]:
                adj[a].add(b)
                adj[b].add(a)
                fill += 1
    return fill


def to_nx(S):
    g = nx.Graph()
    g.add_nodes_from(range(S.n))
    g.add_edges_from(zip(*[x.tolist() for x in S.edges()]))
    return g


def chain(n):
    return SparseSym.from_coo(n, np.r_[np.arange(1, n), np.arange(n)], np.r_[np.arange(n - 1), np.arange(n)])


def arrow(n, hub):
    others = [v for v in range(n) if v != hub]
    return SparseSym.from_coo(n, np.r_[others, np.arange(n)], np.r_[[hub] * len(others), np.arange(n)])


# SparseSym -----------------------------------------------------------------

def test_sparsesym_roundtrip_dense(rng):
    S = random_sparse_pd(rng, 12)
    M = S.to_dense()
    assert np.allclose(M, M.T)
    S2 = SparseSym.from_dense(M)
    assert np.array_equal(S2.values, S.values)
    assert np.allclose(S.matvec(np.arange(12.0)), M @ np.arange(12.0))


def test_sparsesym_rejects_upper_entries():
    with pytest.raises(ValidationError):
        SparseSym(2, [0, 0, 1], [0], [1.0])
    with pytest.raises(ValidationError):
        SparseSym(3, [0, 2, 2, 2], [2, 1], [1.0, 1.0])


def test_permutation_inverse(rng):
    p = Permutation(rng.permutation(9))
    assert np.array_equal(p.forward[p.inverse], np.arange(9))
    with pytest.raises(ValidationError):
        Permutation(np.array([0, 0, 1]))


# orderings -------------------------------------------------------------------

def test_amd_diagonal_zero_fill():
    S = SparseSym.identity_pattern(5)
    assert fill_in(S, amd_order(S)) == 0


def test_amd_star_hub_last_and_minimal():
    S = arrow(5, 0)
    p = amd_order(S)
    assert p.forward[-1] == 0 or fill_in(S, p) == 0
    best = min(brute_fill(S, list(o)) for o in itertools.permutations(range(5)))
    assert fill_in(S, p) == best == 0


def test_amd_chain_zero_fill():
    S = chain(6)
    assert fill_in(S, amd_order(S)) == 0


def test_amd_deterministic(rng):
    S = grid_structure(5, 4)
    assert np.array_equal(amd_order(S).forward, amd_order(S).forward)


def test_amd_beats_identity_statistically():
    rng = np.random.default_rng(3)
    wins = 0
    cases = 40
    for k in range(cases):
        if k % 2:
            nxg, nyg = rng.integers(3, 8, size=2)
            S = grid_structure(int(nxg), int(nyg))
        else:
            n = int(rng.integers(10, 40))
            bw = int(rng.integers(1, 4))
            r, c = [], []
            for i in range(n):
                for j in range(max(0, i - bw), i + 1):
                    if rng.random() < 0.8 or i == j:
                        r.append(i); c.append(j)
            S = SparseSym.from_coo(n, r, c)
        p = Permutation(rng.permutation(S.n))
        Sp = S.permute(p)
        wins += fill_in(Sp, amd_order(Sp)) <= fill_in(Sp)
    assert wins >= 0.9 * cases


def test_rcm_chain_bandwidth():
    S = chain(8)
    assert bandwidth(S, rcm_order(S)) == 1
    rng = np.random.default_rng(0)
    Sp = S.permute(Permutation(rng.permutation(8)))
    assert bandwidth(Sp) > 1
    assert bandwidth(Sp, rcm_order(Sp)) == 1


def test_rcm_grid_bandwidth():
    S = grid_structure(3, 3)
    assert bandwidth(S, rcm_order(S)) <= 3


def test_rcm_disconnected_is_permutation():
    S = SparseSym.from_coo(6, [1, 4, 0, 1, 2, 3, 4, 5], [0, 3, 0, 1, 2, 3, 4, 5])
    p = rcm_order(S)
    assert sorted(p.forward.tolist()) == list(range(6))


# symbolic / numeric ------------------------------------------------------------

def test_symbolic_tridiagonal_no_fill():
    S = chain(7)
    f = symbolic_cholesky(S)
    assert f.nnz == S.nnz
    assert fill_in(S) == 0


def test_symbolic_arrow():
    hub_first = arrow(6, 0)
    f = symbolic_cholesky(hub_first)
    assert f.nnz == 6 * 7 // 2
    hub_last = arrow(6, 5)
    assert symbolic_cholesky(hub_last).nnz == hub_last.nnz


def test_symbolic_matches_elimination_game(rng):
    for _ in range(25):
        S = random_sparse_pd(rng, int(rng.integers(3, 25)), density=0.2)
        p = Permutation(rng.permutation(S.n))
        assert fill_in(S, p) == brute_fill(S, list(p.forward))


def test_numeric_identity_and_2x2():
    I = SparseSym.from_dense(np.eye(5))
    L = numeric_cholesky(I, symbolic_cholesky(I))
    assert np.allclose(L.to_dense_L(), np.eye(5))
    Q = SparseSym.from_dense(np.array([[4.0, 2.0], [2.0, 3.0]]))
    L = numeric_cholesky(Q, symbolic_cholesky(Q))
    assert np.allclose(L.to_dense_L(), [[2, 0], [1, np.sqrt(2)]], atol=1e-15)
    y = solve_triangular(L, np.array([2.0, np.sqrt(2) + 1]), "lower")
    assert np.allclose(y, [1.0, 1.0], atol=1e-15)


def test_numeric_not_pd():
    Q = SparseSym.from_dense(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(NotPositiveDefinite) as e:
        numeric_cholesky(Q, symbolic_cholesky(Q))
    assert e.value.column == 1


def test_numeric_reconstruction(rng):
    for _ in range(20):
        S = random_sparse_pd(rng, int(rng.integers(5, 40)))
        sym = symbolic_cholesky(S, amd_order(S))
        L = numeric_cholesky(S, sym)
        Ld = L.to_dense_L()
        f = sym.perm.forward
        P = S.to_dense()[np.ix_(f, f)]
        err = np.abs(Ld @ Ld.T - P)
        assert err.max() <= 1e-12 * np.abs(P).max() * 10


def test_solve_identity_and_residual(rng):
    I = SparseSym.from_dense(np.eye(4))
    L = numeric_cholesky(I, symbolic_cholesky(I))
    b = rng.normal(size=4)
    assert np.array_equal(solve_triangular(L, b, "lower"), b)
    S = random_sparse_pd(rng, 20)
    L = numeric_cholesky(S, symbolic_cholesky(S, amd_order(S)))
    b = rng.normal(size=20)
    x = cholesky_solve(L, b)
    assert np.abs(S.matvec(x) - b).max() <= 1e-10 * np.abs(b).max()
    with pytest.raises(ValidationError):
        solve_triangular(L, np.ones(3))


# Takahashi -----------------------------------------------------------------------

def check_selected_inverse(S, perm=None, tol=1e-9):
    L = numeric_cholesky(S, symbolic_cholesky(S, perm))
    Z = takahashi_selected_inverse(L)
    dense = np.linalg.inv(S.to_dense())
    r, c, v = Z.triplets()
    ref = dense[r, c]
    err = np.abs(v - ref) / np.maximum(np.abs(ref), np.abs(dense).max() * 1e-3)
    assert err.max() <= tol
    return Z


def test_takahashi_diagonal():
    Z = check_selected_inverse(SparseSym.from_dense(np.diag([2.0, 4.0])))
    assert np.allclose(Z.values, [0.5, 0.25])


def test_takahashi_tridiagonal(rng):
    n = 6
    M = np.diag(rng.random(n) + 3) + np.diag(rng.normal(size=n - 1), -1)
    M = np.tril(M) + np.tril(M, -1).T
    check_selected_inverse(SparseSym.from_dense(M), tol=1e-10)


def test_takahashi_grid_amd():
    S = laplacian_plus_identity(grid_structure(5, 5))
    Z = check_selected_inverse(S, amd_order(S))
    assert Z.contains(S)


def test_takahashi_covers_input_pattern(rng):
    for _ in range(10):
        S = random_sparse_pd(rng, 30)
        L = numeric_cholesky(S, symbolic_cholesky(S, rcm_order(S)))
        assert takahashi_selected_inverse(L).contains(S)


# chordal ---------------------------------------------------------------------------

def test_chordal_complete_tree_unchanged():
    tree = SparseSym.from_coo(7, [1, 2, 3, 4, 5, 6] + list(range(7)), [0, 0, 1, 1, 2, 2] + list(range(7)))
    G = chordal_complete(tree, amd_order(tree))
    assert G.nnz == tree.nnz


def test_chordal_complete_four_cycle():
    C4 = SparseSym.from_coo(4, [1, 2, 3, 3] + list(range(4)), [0, 1, 2, 0] + list(range(4)))
    G = chordal_complete(C4)
    assert G.n_edges() == 5
    assert not is_chordal(C4) and is_chordal(G)


def test_chordal_complete_grid_oracle():
    S = grid_structure(4, 4)
    for p in (None, amd_order(S), rcm_order(S)):
        G = chordal_complete(S, p)
        assert G.contains(S)
        assert is_chordal(G) and nx.is_chordal(to_nx(G))


def test_is_chordal_against_networkx(rng):
    for _ in range(60):
        n = int(rng.integers(3, 14))
        S = random_sparse_pd(rng, n, density=0.3)
        assert is_chordal(S) == nx.is_chordal(to_nx(S))


def check_decomposition(G):
    D = clique_decomposition(G)
    g = to_nx(G)
    maximal = sorted(sorted(c) for c in nx.find_cliques(g))
    assert sorted(sorted(c) for c in D.cliques) == maximal
    seen = set()
    allR = []
    for k, (C, S, R) in enumerate(zip(D.cliques, D.separators, D.residuals)):
        assert set(S) | set(R) == set(C) and not set(S) & set(R)
        assert set(S) == set(C) & seen
        if S:
            assert any(set(S) <= set(D.cliques[q]) for q in range(k))
        seen |= set(C)
        allR += R
    assert sorted(allR) == list(range(G.n))
    return D


def test_clique_decomposition_examples():
    D = check_decomposition(SparseSym.identity_pattern(3))
    assert len(D) == 3 and all(not s for s in D.separators)
    path = SparseSym.from_coo(3, [1, 2, 0, 1, 2], [0, 1, 0, 1, 2])
    D = check_decomposition(path)
    assert sorted(map(sorted, D.cliques)) == [[0, 1], [1, 2]]
    assert D.separators[1] in ([1],) and len(D.residuals[1]) == 1
    C4 = SparseSym.from_coo(4, [1, 2, 3, 3] + list(range(4)), [0, 1, 2, 0] + list(range(4)))
    with pytest.raises(NotChordal):
        clique_decomposition(C4)


def test_clique_decomposition_random_chordal(rng):
    for _ in range(30):
        S = random_sparse_pd(rng, int(rng.integers(4, 30)), density=0.15).pattern()
        G = chordal_complete(S, amd_order(S))
        check_decomposition(G)


# MatrixMarket -------------------------------------------------------------------------

def test_matrix_market_roundtrip(tmp_path, rng):
    S = random_sparse_pd(rng, 15)
    S.values[3] = 0.1 + 1e-17 * 3
    S.values[0] = np.pi * 1e-300
    p = tmp_path / "m.mtx"
    write_matrix_market(p, S)
    S2 = read_matrix_market(p)
    assert np.array_equal(S2.col_ptr, S.col_ptr)
    assert np.array_equal(S2.row_idx, S.row_idx)
    assert np.array_equal(S2.values, S.values)
    assert "symmetric" in p.read_text().splitlines()[0]
