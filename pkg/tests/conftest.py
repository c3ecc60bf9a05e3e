import numpy as np
import pytest

from ecmp.sparse import SparseSym


def random_sparse_pd(rng, n, density=0.15, cond_boost=1.0):
    """Random symmetric positive definite SparseSym with a random pattern."""
    M = np.zeros((n, n))
    mask = np.tril(rng.random((n, n)) < density, -1)
    r, c = np.nonzero(mask)
    M[r, c] = rng.normal(size=r.size)
    M = M + M.T
    M[np.diag_indices(n)] = np.abs(M).sum(1) + cond_boost + rng.random(n)
    return SparseSym.from_dense(M)


def grid_structure(nx, ny):
    idx = np.arange(nx * ny).reshape(ny, nx)
    r, c = [], []
    for y in range(ny):
        for x in range(nx):
            if x + 1 < nx:
                r.append(idx[y, x + 1]); c.append(idx[y, x])
            if y + 1 < ny:
                r.append(idx[y + 1, x]); c.append(idx[y, x])
    n = nx * ny
    r = np.concatenate([r, np.arange(n)])
    c = np.concatenate([c, np.arange(n)])
    return SparseSym.from_coo(n, r, c)


def laplacian_plus_identity(S):
    A = -S.pattern().to_dense()
    np.fill_diagonal(A, 0.0)
    A[np.diag_indices(S.n)] = -A.sum(1) + 1.0
    return SparseSym.from_dense(A)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
