"""Canonical-parameter Gaussian calculus.

Two-slice precision assembly, moment extraction through sparse Cholesky and
selected inversion, the maximum-determinant projection onto chordal
precision structures, and Gaussian KL divergences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numba import njit

from . import _kernels as K
from .errors import NotPositiveDefinite, SingularSeparator, ValidationError
from .sparse import (PIVOT_RTOL, CholeskyFactor, CliqueDecomposition, SparseSym, amd_order, cholesky_solve,
                     clique_decomposition, numeric_cholesky, symbolic_cholesky, takahashi_selected_inverse)

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class CanonicalGaussian:
    """exp(h^T x - x^T Q x / 2) over the variables in ``scope``."""

    scope: np.ndarray
    h: np.ndarray
    Q: SparseSym

    def __post_init__(self):
        self.scope = np.asarray(self.scope, dtype=np.int64)
        self.h = np.asarray(self.h, dtype=float)
        if not (self.h.shape[0] == self.scope.shape[0] == self.Q.n):
            raise ValidationError("scope, h and Q dimensions differ")

    @classmethod
    def zeros(cls, scope, structure: SparseSym):
        return cls(scope, np.zeros(structure.n), structure.with_values(np.zeros(structure.nnz)))

    def moments(self):
        """Dense mean and covariance (small problems and tests)."""
        P = self.Q.to_dense()
        c, low = sla.cho_factor(P, lower=True)
        return sla.cho_solve((c, low), self.h), sla.cho_solve((c, low), np.eye(P.shape[0]))


@dataclass
class MomentGaussian:
    """Mean and covariance entries on a given structure (or a full matrix)."""

    mean: np.ndarray
    cov: object  # SparseSym of selected entries or a dense ndarray

    def cov_entry(self, i, j):
        if isinstance(self.cov, np.ndarray):
            return self.cov[i, j]
        pos = self.cov.positions([i], [j])[0]
        if pos < 0:
            raise KeyError((i, j))
        return self.cov.values[pos]


def divide(num: CanonicalGaussian, den: CanonicalGaussian) -> CanonicalGaussian:
    """Quotient of Gaussian factors: subtraction of canonical parameters."""
    if num.scope.shape != den.scope.shape or np.any(num.scope != den.scope):
        raise ValidationError("scope mismatch")
    if num.Q.nnz == den.Q.nnz and np.array_equal(num.Q.row_idx, den.Q.row_idx) and np.array_equal(num.Q.col_ptr, den.Q.col_ptr):
        Q = num.Q.with_values(num.Q.values - den.Q.values)
    else:
        r1, c1, v1 = num.Q.triplets()
        r2, c2, v2 = den.Q.triplets()
        Q = SparseSym.from_coo(num.Q.n, np.r_[r1, r2], np.r_[c1, c2], np.r_[v1, -v2])
    return CanonicalGaussian(num.scope, num.h - den.h, Q)


def log_partition(h, P):
    """log of the integral of exp(h^T x - x^T P x / 2) for dense P."""
    c, low = sla.cho_factor(P, lower=True)
    m = sla.cho_solve((c, low), h)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return 0.5 * h @ m - 0.5 * logdet + 0.5 * len(h) * LOG2PI


# KL divergences ---------------------------------------------------------------

def gaussian_kl(mp, Vp, mq, Vq) -> float:
    """KL(N(mp, Vp) || N(mq, Vq)) for full covariances."""
    mp, mq = np.asarray(mp, float), np.asarray(mq, float)
    d = mp.shape[0]
    try:
        cq = sla.cho_factor(Vq, lower=True)
        cp = sla.cho_factor(Vp, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(-1) from exc
    dm = mq - mp
    tr = np.trace(sla.cho_solve(cq, Vp))
    quad = dm @ sla.cho_solve(cq, dm)
    ld_q = 2 * np.sum(np.log(np.diag(cq[0])))
    ld_p = 2 * np.sum(np.log(np.diag(cp[0])))
    return 0.5 * (tr + quad - d + ld_q - ld_p)


def kl_precision(mp, Pp, mq, Pq) -> float:
    """KL(N(mp, Pp^-1) || N(mq, Pq^-1)) from precision matrices."""
    d = len(mp)
    try:
        cp = sla.cho_factor(Pp, lower=True)
        cq = np.linalg.cholesky(Pq)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(-1) from exc
    Vp = sla.cho_solve(cp, np.eye(d))
    dm = np.asarray(mq) - np.asarray(mp)
    ld_p = 2 * np.sum(np.log(np.diag(cp[0])))
    ld_q = 2 * np.sum(np.log(np.diag(cq)))
    return 0.5 * (np.sum(Pq * Vp) + dm @ Pq @ dm - d + ld_p - ld_q)


def symmetric_kl(mp, Vp, mq, Vq) -> float:
    return 0.5 * (gaussian_kl(mp, Vp, mq, Vq) + gaussian_kl(mq, Vq, mp, Vp))


# chordal projection ---------------------------------------------------------------

@njit(cache=True, nogil=True)
def _chol(M):
    n = M.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True, nogil=True)
def _chol_solve(L, B):
    n = L.shape[0]
    X = B.copy()
    for c in range(X.shape[1]):
        for i in range(n):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True, nogil=True)
def _project_kernel(cptr, sizes_s, idx_ptr, idx, vals, out):
    """Accumulate the clique-wise max-det precision into ``out``.

    Clique k has |S| = sizes_s[k] separator and the remaining residual
    members; ``idx[idx_ptr[k]:idx_ptr[k+1]]`` is the row-major |C| x |C|
    table of storage positions.  Returns -1 or the failing clique.
    """
    out[:] = 0.0
    nk = cptr.shape[0] - 1
    for k in range(nk):
        c = cptr[k + 1] - cptr[k]
        s = sizes_s[k]
        r = c - s
        base = idx_ptr[k]
        V = np.empty((c, c))
        for a in range(c):
            for b in range(c):
                V[a, b] = vals[idx[base + a * c + b]]
        if s == 0:
            L, ok = _chol(V)
            if not ok:
                return k
            D = _chol_solve(L, np.eye(c))
            for a in range(c):
                for b in range(a, c):
                    out[idx[base + a * c + b]] += D[a, b]
            continue
        Vss = V[:s, :s].copy()
        Vsr = V[:s, s:].copy()
        Vrr = V[s:, s:].copy()
        Ls, ok = _chol(Vss)
        if not ok:
            return k
        B = _chol_solve(Ls, Vsr)
        schur = Vrr - Vsr.T @ B
        Lr, ok = _chol(schur)
        if not ok:
            return k
        D = _chol_solve(Lr, np.eye(r))
        BD = B @ D
        BDB = BD @ B.T
        for a in range(s):
            for b in range(a, s):
                out[idx[base + a * c + b]] += BDB[a, b]
            for b in range(r):
                out[idx[base + a * c + s + b]] -= BD[a, b]
        for a in range(r):
            for b in range(a, r):
                out[idx[base + (s + a) * c + s + b]] += D[a, b]
    return -1


@njit(cache=True, nogil=True)
def _sym_matvec(n, col_ptr, row_idx, vals, x):
    y = np.zeros(n)
    for j in range(n):
        for p in range(col_ptr[j], col_ptr[j + 1]):
            i = row_idx[p]
            y[i] += vals[p] * x[j]
            if i != j:
                y[j] += vals[p] * x[i]
    return y


class ChordalProjector:
    """Precomputed plan for moment matching onto Gaussians with precision on G.

    Covariance and precision values are exchanged in the storage order of
    ``G`` (a SparseSym with the full diagonal).  The clique order satisfies
    the running-intersection property, so every separator lies in an earlier
    clique and the contributions sum to the max-det completion.
    """

    def __init__(self, G: SparseSym, decomposition: Optional[CliqueDecomposition] = None):
        if not np.all(G.positions(np.arange(G.n), np.arange(G.n)) >= 0):
            raise ValidationError("message structure must contain the diagonal")
        self.G = G.pattern()
        self.n = G.n
        self.decomposition = decomposition or clique_decomposition(self.G)
        D = self.decomposition
        cptr = [0]
        sizes_s = []
        idx_ptr = [0]
        idx = []
        for C, S, R in zip(D.cliques, D.separators, D.residuals):
            members = np.array(list(S) + list(R), dtype=np.int64)
            c = members.size
            rr, cc = np.meshgrid(members, members, indexing="ij")
            pos = self.G.positions(rr.ravel(), cc.ravel())
            if np.any(pos < 0):
                raise ValidationError("clique entry missing from message structure")
            idx.append(pos)
            cptr.append(cptr[-1] + c)
            sizes_s.append(len(S))
            idx_ptr.append(idx_ptr[-1] + c * c)
        self._cptr = np.array(cptr, np.int64)
        self._sizes_s = np.array(sizes_s, np.int64)
        self._idx_ptr = np.array(idx_ptr, np.int64)
        self._idx = np.concatenate(idx) if idx else np.zeros(0, np.int64)
        self.diagonal_only = self.G.nnz == self.n
        self._diag_pos = self.G.positions(np.arange(self.n), np.arange(self.n))

    @property
    def size(self):
        return self.G.nnz

    def project_values(self, cov_vals, mean, out=None):
        """Return (h, Q values on G) of the projection of N(mean, V)."""
        if out is None:
            out = np.empty(self.G.nnz)
        if self.diagonal_only:
            if np.any(~(cov_vals > 0)):
                raise SingularSeparator("non-positive marginal variance")
            np.divide(1.0, cov_vals, out=out)
            return out * mean, out
        code = _project_kernel(self._cptr, self._sizes_s, self._idx_ptr, self._idx, cov_vals, out)
        if code >= 0:
            raise SingularSeparator(f"clique {code} has a singular separator or residual block")
        h = _sym_matvec(self.n, self.G.col_ptr, self.G.row_idx, out, mean)
        return h, out

    def matvec(self, qvals, x):
        return _sym_matvec(self.n, self.G.col_ptr, self.G.row_idx, qvals, x)


def project_chordal(mom: MomentGaussian, G, decomposition: Optional[CliqueDecomposition] = None) -> CanonicalGaussian:
    """Max-det / moment-matching projection of N(m, V) onto precision structure G.

    ``G`` may be a SparseSym (chordal, diagonal included) or a ChordalProjector.
    """
    proj = G if isinstance(G, ChordalProjector) else ChordalProjector(G, decomposition)
    r, c = proj.G.row_idx, proj.G.col_indices()
    if isinstance(mom.cov, np.ndarray):
        vals = mom.cov[r, c]
    else:
        pos = mom.cov.positions(r, c)
        if np.any(pos < 0):
            raise ValidationError("covariance entries missing on the message structure")
        vals = mom.cov.values[pos]
    h, q = proj.project_values(np.ascontiguousarray(vals, dtype=float), np.asarray(mom.mean, float))
    return CanonicalGaussian(np.arange(proj.n), h, proj.G.with_values(q))


# two-slice assembly -----------------------------------------------------------------

@dataclass
class TransitionMoments:
    """Expectations of the transition model entering the two-slice precision.

    ``EA`` is a scipy sparse n x n matrix, ``EQ`` and ``EAtQA`` are SparseSym.
    ``drift`` optionally holds E[B] u_t per transition (shape (T-1, n)).
    """

    EA: sp.csr_matrix
    EQ: SparseSym
    EAtQA: SparseSym
    drift: Optional[np.ndarray] = None

    @classmethod
    def deterministic(cls, A, Q, drift=None):
        A = sp.csr_matrix(A)
        Qs = Q if isinstance(Q, SparseSym) else SparseSym.from_dense(np.asarray(Q))
        Qm = Qs.to_scipy()
        M = (A.T @ Qm @ A).tocoo()
        pat = structural_product_pattern(A, Qs)
        vals = np.zeros(pat.nnz)
        pos = pat.positions(M.row, M.col)
        keep = M.row >= M.col
        vals[pos[keep]] = M.data[keep]
        return cls(A, Qs, pat.with_values(vals), drift)

    @property
    def n(self):
        return self.EQ.n

    def QA(self):
        return (self.EQ.to_scipy() @ self.EA).tocsr()


def structural_product_pattern(A, Q: SparseSym) -> SparseSym:
    """Pattern of A^T Q A computed with unit values, so no entry cancels."""
    Ap = sp.csr_matrix(A, copy=True)
    Ap.data = np.ones_like(Ap.data)
    Qp = Q.pattern().to_scipy()
    M = (Ap.T @ Qp @ Ap).tocoo()
    n = A.shape[0]
    r = np.concatenate([M.row, np.arange(n)])
    c = np.concatenate([M.col, np.arange(n)])
    keep = r >= c
    return SparseSym.from_coo(n, r[keep], c[keep], sum_duplicates=False)


def _qa_pattern(A, Q: SparseSym):
    Ap = sp.csr_matrix(A, copy=True)
    Ap.data = np.ones_like(Ap.data)
    M = (Q.pattern().to_scipy() @ Ap).tocoo()
    return M.row.astype(np.int64), M.col.astype(np.int64)


def assemble_two_slice(tm: TransitionMoments, alpha: Optional[CanonicalGaussian] = None,
                       beta: Optional[CanonicalGaussian] = None, lam0_h=None, lam0_q=None,
                       h_y=None, q_y=None, h_u=None, prior: Optional[CanonicalGaussian] = None):
    """Canonical parameters (h, Q) of the two-slice marginal over (x_t, x_{t+1}).

    Q = [[E[A^T Q A] + Q_alpha, -E[A]^T E[Q]], [-E[Q] E[A], E[Q] + Q_beta + Q_lambda]],
    h = [h_alpha + h_u, h_beta + h_y + h_lambda].  ``prior`` (the initial
    state density in canonical form) is added to the first block; ``h_u`` is
    the control offset of the first block and ``q_y`` an optional diagonal
    precision of exact Gaussian observations at t+1.
    """
    n = tm.n
    parts_r, parts_c, parts_v = [], [], []

    def add(S: SparseSym, off):
        if S.n != n:
            raise ValidationError("dimension mismatch")
        r, c, v = S.triplets()
        parts_r.append(r + off)
        parts_c.append(c + off)
        parts_v.append(v)

    add(tm.EAtQA, 0)
    add(tm.EQ, n)
    QA = tm.QA().tocoo()
    parts_r.append(QA.row + n)
    parts_c.append(QA.col)
    parts_v.append(-QA.data)
    h = np.zeros(2 * n)
    if alpha is not None:
        add(alpha.Q, 0)
        h[:n] += alpha.h
    if prior is not None:
        add(prior.Q, 0)
        h[:n] += prior.h
    if beta is not None:
        add(beta.Q, n)
        h[n:] += beta.h
    diag2 = np.zeros(n)
    for q in (lam0_q, q_y):
        if q is not None:
            diag2 += np.asarray(q, float)
    parts_r.append(np.arange(n, 2 * n))
    parts_c.append(np.arange(n, 2 * n))
    parts_v.append(diag2)
    for v in (lam0_h, h_y):
        if v is not None:
            h[n:] += np.asarray(v, float)
    if h_u is not None:
        h[:n] += np.asarray(h_u, float)
    Q = SparseSym.from_coo(2 * n, np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v))
    return CanonicalGaussian(np.arange(2 * n), h, Q)


@dataclass
class TwoSliceMarginal:
    canonical: CanonicalGaussian
    factor: CholeskyFactor
    mean: np.ndarray
    cov: SparseSym


def selected_moments(cg: CanonicalGaussian, perm=None) -> TwoSliceMarginal:
    """Mean by triangular solves and covariance on pattern(L + L^T) by Takahashi."""
    Q = cg.Q
    if perm is None:
        perm = amd_order(Q)
    L = numeric_cholesky(Q, symbolic_cholesky(Q, perm))
    m = cholesky_solve(L, cg.h)
    return TwoSliceMarginal(cg, L, m, takahashi_selected_inverse(L))


# fast plans used by the engine ---------------------------------------------------------

class SparseTwoSlicePlan:
    """Fixed two-slice sparsity pattern with scatter/gather maps.

    Every slice uses the same pattern: block (1,1) holds S(A^T Q A), the
    message structure G, the diagonal and the initial-state prior pattern;
    block (2,2) holds S(Q), G and the diagonal; block (2,1) holds S(Q A).
    Values are assembled by adding message vectors stored in G order.
    """

    dense = False

    def __init__(self, n, A_pattern, Q_pattern: SparseSym, G: SparseSym, prior_pattern: Optional[SparseSym] = None,
                 ordering="amd"):
        self.n = n
        self.G = G.pattern()
        AtQA = structural_product_pattern(A_pattern, Q_pattern)
        b11 = AtQA.union(self.G, SparseSym.identity_pattern(n))
        if prior_pattern is not None:
            b11 = b11.union(prior_pattern)
        b22 = Q_pattern.union(self.G, SparseSym.identity_pattern(n))
        qr, qc = _qa_pattern(A_pattern, Q_pattern)
        r11, c11, _ = b11.triplets()
        r22, c22, _ = b22.triplets()
        rows = np.concatenate([r11, r22 + n, qr + n])
        cols = np.concatenate([c11, c22 + n, qc])
        self.P = SparseSym.from_coo(2 * n, rows, cols, sum_duplicates=False)
        if ordering == "amd":
            perm = amd_order(self.P)
        elif ordering == "natural":
            perm = None
        else:
            from .sparse import rcm_order
            perm = rcm_order(self.P)
        self.sym = symbolic_cholesky(self.P, perm)
        self.tmap = K.takahashi_map(self.sym.n, self.sym.Lp, self.sym.Li)
        gr, gc = self.G.row_idx, self.G.col_indices()
        self.dst_G1 = self._pos(gr, gc)
        self.dst_G2 = self._pos(gr + n, gc + n)
        d = np.arange(n)
        self.dst_d1 = self._pos(d, d)
        self.dst_d2 = self._pos(d + n, d + n)
        self.z_G1 = self.sym.positions(gr, gc)
        self.z_G2 = self.sym.positions(gr + n, gc + n)
        self.z_d1 = self.sym.positions(d, d)
        self.z_d2 = self.sym.positions(d + n, d + n)
        self.Lx = np.empty(self.sym.nnz)
        self._Q_pattern = Q_pattern
        self._A_pattern = sp.csr_matrix(A_pattern)

    def _pos(self, r, c):
        pos = self.P.positions(r, c)
        if np.any(pos < 0):
            raise ValidationError("entry outside the two-slice pattern")
        return pos

    @property
    def size(self):
        return self.P.nnz

    def base_values(self, tm: TransitionMoments):
        """Constant part of the two-slice precision for given model expectations."""
        n = self.n
        v = np.zeros(self.P.nnz)
        r, c, x = tm.EAtQA.triplets()
        np.add.at(v, self._pos(r, c), x)
        r, c, x = tm.EQ.triplets()
        np.add.at(v, self._pos(r + n, c + n), x)
        QA = tm.QA().tocoo()
        np.add.at(v, self._pos(QA.row + n, QA.col), -QA.data)
        return v

    def prior_values(self, prior_Q: SparseSym):
        v = np.zeros(self.P.nnz)
        r, c, x = prior_Q.triplets()
        np.add.at(v, self._pos(r, c), x)
        return v

    def factor(self, values, piv_scale, out=None):
        Lx = self.Lx if out is None else out
        code = K.numeric_factor(self.sym.n, self.sym.Lp, self.sym.Li, self.sym.Rp, self.sym.Rj, self.sym.Rpos,
                                self.sym.ap, self.sym.ai, self.sym.asrc, values, PIVOT_RTOL * piv_scale, Lx)
        return code, Lx

    def moments(self, Lx, h):
        """Mean, covariance values on G for both blocks and marginal variances."""
        s = self.sym
        f = s.perm.forward
        y = K.lsolve(s.n, s.Lp, s.Li, Lx, h[f])
        x = K.ltsolve(s.n, s.Lp, s.Li, Lx, y)
        m = np.empty(2 * self.n)
        m[f] = x
        Z = K.takahashi_mapped(s.n, s.Lp, Lx, *self.tmap)
        return m, Z[self.z_G1], Z[self.z_G2], Z[self.z_d1], Z[self.z_d2], Z

    def whiten(self, Lx, x, m):
        """L^T P (x - m) for the residual checks."""
        s = self.sym
        d = (x - m)[s.perm.forward]
        return K.ltmul(s.n, s.Lp, s.Li, Lx, d)

    def dense_precision(self, values):
        return self.P.with_values(values).to_dense()

    def cov_entries(self, Z, rows, cols):
        pos = self.sym.positions(rows, cols)
        if np.any(pos < 0):
            raise ValidationError("requested covariance entry outside pattern(L + L^T)")
        return Z[pos]


class DenseTwoSlicePlan:
    """Dense counterpart of SparseTwoSlicePlan for fully connected messages."""

    dense = True

    def __init__(self, n, A_pattern=None, Q_pattern=None, G=None, prior_pattern=None, ordering=None):
        self.n = n
        self.G = SparseSym.complete(n)
        gr, gc = self.G.row_idx, self.G.col_indices()
        N = 2 * n
        self.P = SparseSym.complete(N)
        self._gr, self._gc = gr, gc
        self.dst_G1 = gr * N + gc
        self.dst_G2 = (gr + n) * N + (gc + n)
        self.dst_G1T = gc * N + gr
        self.dst_G2T = (gc + n) * N + (gr + n)
        d = np.arange(n)
        self.dst_d1 = d * N + d
        self.dst_d2 = (d + n) * N + (d + n)

    @property
    def size(self):
        return (2 * self.n) ** 2

    def base_values(self, tm: TransitionMoments):
        n = self.n
        M = np.zeros((2 * n, 2 * n))
        M[:n, :n] = tm.EAtQA.to_dense()
        M[n:, n:] = tm.EQ.to_dense()
        QA = tm.QA().toarray()
        M[n:, :n] = -QA
        M[:n, n:] = -QA.T
        return M.ravel()

    def prior_values(self, prior_Q: SparseSym):
        n = self.n
        M = np.zeros((2 * n, 2 * n))
        M[:n, :n] = prior_Q.to_dense()
        return M.ravel()

    def add_G(self, v, qvals, block):
        if block == 1:
            v[self.dst_G1] += qvals
            off = self._gr != self._gc
            v[self.dst_G1T[off]] += qvals[off]
        else:
            v[self.dst_G2] += qvals
            off = self._gr != self._gc
            v[self.dst_G2T[off]] += qvals[off]

    def factor(self, values, piv_scale, out=None):
        N = 2 * self.n
        M = values.reshape(N, N)
        try:
            c = sla.cholesky(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return 0, None
        d = np.diag(c)
        if not np.all(d * d > PIVOT_RTOL * piv_scale):
            return int(np.argmin(d)), None
        return -1, c

    def moments(self, c, h):
        N = 2 * self.n
        n = self.n
        m = sla.cho_solve((c, True), h, check_finite=False)
        V = _chol_inverse(c)
        V1 = V[:n, :n][self._gr, self._gc]
        V2 = V[n:, n:][self._gr, self._gc]
        return m, V1, V2, np.diag(V)[:n].copy(), np.diag(V)[n:].copy(), V

    def whiten(self, c, x, m):
        return c.T @ (x - m)

    def dense_precision(self, values):
        N = 2 * self.n
        return values.reshape(N, N).copy()

    def cov_entries(self, V, rows, cols):
        return V[np.asarray(rows), np.asarray(cols)]


def _chol_inverse(c):
    """Symmetric inverse from a lower Cholesky factor (LAPACK potri)."""
    inv, info = sla.lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("potri failed")
    return np.tril(inv) + np.tril(inv, -1).T


class DenseProjector:
    """Projection onto the unrestricted family: inverse of the covariance block."""

    def __init__(self, n):
        self.n = n
        self.G = SparseSym.complete(n)
        self._r, self._c = self.G.row_idx, self.G.col_indices()
        self.diagonal_only = n == 1

    @property
    def size(self):
        return self.G.nnz

    def to_dense(self, vals):
        M = np.zeros((self.n, self.n))
        M[self._r, self._c] = vals
        M[self._c, self._r] = vals
        return M

    def project_values(self, cov_vals, mean, out=None):
        V = self.to_dense(cov_vals)
        try:
            c = sla.cho_factor(V, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSeparator("covariance block is singular") from exc
        P = _chol_inverse(c[0])
        q = P[self._r, self._c]
        if out is not None:
            out[:] = q
            q = out
        return P @ mean, q

    def matvec(self, qvals, x):
        return self.to_dense(qvals) @ x
