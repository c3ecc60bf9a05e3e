"""Sparse symmetric matrices, fill-reducing orderings, Cholesky factorisation,
selected inversion and chordal graph utilities."""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import _kernels as K
from .errors import NotChordal, NotPositiveDefinite, ValidationError

PIVOT_RTOL = 1e-12


class SparseSym:
    """Symmetric matrix stored as the lower triangle in compressed columns.

    ``row_idx`` is strictly increasing within each column and the diagonal,
    when present, is the first entry of its column.  Explicit zeros are kept,
    so the object doubles as a structure (pattern) carrier.
    """

    __slots__ = ("n", "col_ptr", "row_idx", "values")

    def __init__(self, n, col_ptr, row_idx, values=None, check=True):
        self.n = int(n)
        self.col_ptr = np.ascontiguousarray(col_ptr, dtype=np.int64)
        self.row_idx = np.ascontiguousarray(row_idx, dtype=np.int64)
        if values is None:
            values = np.ones(self.row_idx.shape[0])
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if check:
            self._check()

    def _check(self):
        n = self.n
        if self.col_ptr.shape != (n + 1,) or self.col_ptr[0] != 0:
            raise ValidationError("bad column pointer array")
        if self.col_ptr[-1] != self.row_idx.shape[0] or self.values.shape != self.row_idx.shape:
            raise ValidationError("inconsistent storage lengths")
        if np.any(np.diff(self.col_ptr) < 0):
            raise ValidationError("column pointers must be non-decreasing")
        if self.nnz:
            cols = self.col_indices()
            if np.any(self.row_idx < cols) or np.any(self.row_idx >= n):
                raise ValidationError("entries must lie in the lower triangle")
            same = cols[1:] == cols[:-1]
            if np.any(self.row_idx[1:][same] <= self.row_idx[:-1][same]):
                raise ValidationError("row indices must increase within a column")

    # construction -------------------------------------------------------
    @classmethod
    def from_coo(cls, n, rows, cols, vals=None, sum_duplicates=True):
        """Build from triplets; entries are folded into the lower triangle.

        With ``sum_duplicates`` repeated (i, j) pairs are added, otherwise the
        last one wins.  Pass entries of only one triangle for symmetric input.
        """
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if vals is None:
            vals = np.ones(rows.shape[0])
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if rows.shape != cols.shape or rows.shape != vals.shape:
            raise ValidationError("triplet arrays must have equal length")
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
            raise ValidationError("index out of range")
        lo = np.maximum(rows, cols)
        hi = np.minimum(rows, cols)
        key = hi * n + lo
        order = np.argsort(key, kind="stable")
        key = key[order]
        vals = vals[order]
        uniq, start = np.unique(key, return_index=True)
        if sum_duplicates:
            v = np.add.reduceat(vals, start) if vals.size else vals
        else:
            end = np.append(start[1:], key.size) - 1
            v = vals[end]
        c = uniq // n
        r = uniq % n
        col_ptr = np.zeros(n + 1, np.int64)
        np.add.at(col_ptr, c + 1, 1)
        np.cumsum(col_ptr, out=col_ptr)
        return cls(n, col_ptr, r, v, check=False)

    @classmethod
    def from_dense(cls, M, tol=0.0, keep_diagonal=True):
        M = np.asarray(M, dtype=float)
        n = M.shape[0]
        if M.shape != (n, n):
            raise ValidationError("matrix must be square")
        r, c = np.nonzero(np.tril(np.abs(M) > tol))
        if keep_diagonal:
            d = np.arange(n)
            r = np.concatenate([r, d])
            c = np.concatenate([c, d])
        return cls.from_coo(n, r, c, M[r, c], sum_duplicates=False)

    @classmethod
    def from_scipy(cls, A):
        A = sp.coo_matrix(A)
        n = A.shape[0]
        keep = A.row >= A.col
        return cls.from_coo(n, A.row[keep], A.col[keep], A.data[keep])

    @classmethod
    def identity_pattern(cls, n):
        return cls(n, np.arange(n + 1), np.arange(n), np.ones(n), check=False)

    @classmethod
    def complete(cls, n):
        r, c = np.tril_indices(n)
        return cls.from_coo(n, r, c)

    # accessors ------------------------------------------------------------
    @property
    def nnz(self):
        return int(self.row_idx.shape[0])

    def col_indices(self):
        return np.repeat(np.arange(self.n), np.diff(self.col_ptr))

    def triplets(self):
        return self.row_idx.copy(), self.col_indices(), self.values.copy()

    def to_dense(self):
        M = np.zeros((self.n, self.n))
        r, c, v = self.triplets()
        M[r, c] = v
        M[c, r] = v
        return M

    def to_scipy(self):
        r, c, v = self.triplets()
        off = r != c
        rows = np.concatenate([r, c[off]])
        cols = np.concatenate([c, r[off]])
        return sp.csc_matrix((np.concatenate([v, v[off]]), (rows, cols)), shape=(self.n, self.n))

    def with_values(self, values):
        return SparseSym(self.n, self.col_ptr, self.row_idx, values, check=False)

    def pattern(self):
        return self.with_values(np.ones(self.nnz))

    def edges(self):
        """Strictly lower (i, j) pairs, i > j."""
        r, c, _ = self.triplets()
        off = r != c
        return r[off], c[off]

    def n_edges(self):
        return int(np.count_nonzero(self.row_idx != self.col_indices()))

    def adjacency(self):
        """Neighbour sets, excluding self loops."""
        adj = [set() for _ in range(self.n)]
        for i, j in zip(*self.edges()):
            adj[int(i)].add(int(j))
            adj[int(j)].add(int(i))
        return adj

    def diagonal(self):
        d = np.zeros(self.n)
        r, c, v = self.triplets()
        on = r == c
        d[r[on]] = v[on]
        return d

    def positions(self, rows, cols):
        """Storage positions of entries (i, j); -1 where absent."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lo = np.maximum(rows, cols)
        hi = np.minimum(rows, cols)
        key_store = self.col_indices() * self.n + self.row_idx
        key = hi * self.n + lo
        pos = np.searchsorted(key_store, key)
        pos = np.minimum(pos, max(self.nnz - 1, 0))
        ok = (self.nnz > 0) & (key_store[pos] == key) if self.nnz else np.zeros(key.shape, bool)
        return np.where(ok, pos, -1)

    def union(self, *others):
        """Pattern union (values are discarded)."""
        rs, cs = [self.row_idx], [self.col_indices()]
        for o in others:
            if o.n != self.n:
                raise ValidationError("dimension mismatch")
            rs.append(o.row_idx)
            cs.append(o.col_indices())
        r = np.concatenate(rs)
        c = np.concatenate(cs)
        return SparseSym.from_coo(self.n, r, c, np.ones(r.size), sum_duplicates=False)

    def contains(self, other):
        """True if the pattern of ``other`` is a subset of this pattern."""
        r, c, _ = other.triplets()
        return bool(np.all(self.positions(r, c) >= 0))

    def permute(self, perm: "Permutation"):
        """Symmetric permutation P A P^T, new index k holds old perm.forward[k]."""
        r, c, v = self.triplets()
        inv = perm.inverse
        return SparseSym.from_coo(self.n, inv[r], inv[c], v, sum_duplicates=False)

    def matvec(self, x):
        r, c, v = self.triplets()
        y = np.zeros(self.n)
        np.add.at(y, r, v * x[c])
        off = r != c
        np.add.at(y, c[off], v[off] * x[r[off]])
        return y

    def __repr__(self):
        return f"SparseSym(n={self.n}, nnz={self.nnz})"


@dataclass(frozen=True)
class Permutation:
    """``forward[new] = old``; ``inverse[old] = new``."""

    forward: np.ndarray
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        f = np.ascontiguousarray(self.forward, dtype=np.int64)
        n = f.shape[0]
        if n and (np.sort(f) != np.arange(n)).any():
            raise ValidationError("not a permutation")
        inv = np.empty(n, np.int64)
        inv[f] = np.arange(n)
        object.__setattr__(self, "forward", f)
        object.__setattr__(self, "inverse", inv)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    @property
    def n(self):
        return self.forward.shape[0]


# orderings ----------------------------------------------------------------

def amd_order(S: SparseSym) -> Permutation:
    """Minimum-degree ordering on the elimination graph.

    Degrees are exact (not the approximate bounds of AMD proper); ties go to
    the lowest original index.  Deterministic for fixed input.
    """
    n = S.n
    adj = S.adjacency()
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, bool)
    order = []
    while heap:
        d, v = heapq.heappop(heap)
        if done[v] or d != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nb = adj[v]
        for u in nb:
            au = adj[u]
            au.discard(v)
            au |= nb
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return Permutation(np.array(order, dtype=np.int64))


def _bfs_levels(adj, start, allowed=None):
    level = {start: 0}
    q = deque([start])
    last = [start]
    while q:
        v = q.popleft()
        for u in adj[v]:
            if u not in level:
                level[u] = level[v] + 1
                q.append(u)
    depth = max(level.values())
    last = sorted(u for u, lv in level.items() if lv == depth)
    return level, depth, last


def _pseudo_peripheral(adj, start):
    """George-Liu iteration; ties broken by lowest degree then lowest index."""
    v = start
    _, depth, last = _bfs_levels(adj, v)
    while True:
        cand = min(last, key=lambda u: (len(adj[u]), u))
        _, d2, last2 = _bfs_levels(adj, cand)
        if d2 <= depth:
            return v
        v, depth, last = cand, d2, last2


def rcm_order(S: SparseSym) -> Permutation:
    """Reverse Cuthill-McKee; each component starts at a pseudo-peripheral node."""
    n = S.n
    adj = S.adjacency()
    seen = np.zeros(n, bool)
    order = []
    for s0 in range(n):
        if seen[s0]:
            continue
        start = _pseudo_peripheral(adj, s0)
        seen[start] = True
        comp = [start]
        head = 0
        while head < len(comp):
            v = comp[head]
            head += 1
            nbrs = sorted((u for u in adj[v] if not seen[u]), key=lambda u: (len(adj[u]), u))
            for u in nbrs:
                seen[u] = True
                comp.append(u)
        order.extend(comp)
    return Permutation(np.array(order[::-1], dtype=np.int64))


def bandwidth(S: SparseSym, perm: Optional[Permutation] = None) -> int:
    r, c = S.edges()
    if r.size == 0:
        return 0
    if perm is not None:
        r, c = perm.inverse[r], perm.inverse[c]
    return int(np.max(np.abs(r - c)))


# Cholesky -----------------------------------------------------------------

@dataclass
class CholeskyFactor:
    """Symbolic pattern of L for a permuted matrix plus optional numeric values.

    ``Lp``/``Li`` hold the column patterns in permuted indices.  The maps
    ``ap``/``ai``/``asrc`` read row k of the permuted input directly from the
    value array of the original (unpermuted) SparseSym it was built for.
    """

    n: int
    perm: Permutation
    parent: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Rp: np.ndarray
    Rj: np.ndarray
    Rpos: np.ndarray
    ap: np.ndarray
    ai: np.ndarray
    asrc: np.ndarray
    source_nnz: int
    Lx: Optional[np.ndarray] = None

    @property
    def nnz(self):
        return int(self.Li.shape[0])

    def col_indices(self):
        return np.repeat(np.arange(self.n), np.diff(self.Lp))

    def pattern(self) -> SparseSym:
        """Pattern of L + L^T in original indices."""
        f = self.perm.forward
        return SparseSym.from_coo(self.n, f[self.Li], f[self.col_indices()], np.ones(self.nnz), sum_duplicates=False)

    def to_dense_L(self):
        if self.Lx is None:
            raise ValidationError("factor has no numeric values")
        L = np.zeros((self.n, self.n))
        L[self.Li, self.col_indices()] = self.Lx
        return L

    def with_values(self, Lx):
        f = CholeskyFactor(**{k: getattr(self, k) for k in self.__dataclass_fields__ if k != "Lx"})
        f.Lx = Lx
        return f

    def positions(self, rows, cols):
        """Storage positions in ``Lx`` of original-index entries (i, j); -1 if absent."""
        inv = self.perm.inverse
        pi = inv[np.asarray(rows, dtype=np.int64)]
        pj = inv[np.asarray(cols, dtype=np.int64)]
        lo = np.maximum(pi, pj)
        hi = np.minimum(pi, pj)
        key_store = self.col_indices() * self.n + self.Li
        key = hi * self.n + lo
        pos = np.searchsorted(key_store, key)
        pos = np.minimum(pos, self.nnz - 1)
        return np.where(key_store[pos] == key, pos, -1)


def symbolic_cholesky(S: SparseSym, perm: Optional[Permutation] = None) -> CholeskyFactor:
    """Elimination tree and exact fill pattern of the Cholesky factor of S[perm, perm]."""
    n = S.n
    if perm is None:
        perm = Permutation.identity(n)
    if perm.n != n:
        raise ValidationError("permutation size mismatch")
    inv = perm.inverse
    r = inv[S.row_idx]
    c = inv[S.col_indices()]
    lo = np.maximum(r, c)
    hi = np.minimum(r, c)
    src = np.arange(S.nnz, dtype=np.int64)
    # row-wise permuted input including the diagonal, columns increasing
    d = np.arange(n)
    rows_all = np.concatenate([lo, d])
    cols_all = np.concatenate([hi, d])
    src_all = np.concatenate([src, -np.ones(n, np.int64)])
    order = np.lexsort((cols_all, rows_all))
    rows_all, cols_all, src_all = rows_all[order], cols_all[order], src_all[order]
    real = src_all >= 0
    ap = np.zeros(n + 1, np.int64)
    np.add.at(ap, rows_all[real] + 1, 1)
    np.cumsum(ap, out=ap)
    ai = cols_all[real]
    asrc = src_all[real]
    strict = rows_all != cols_all
    sr = rows_all[strict]
    rp = np.zeros(n + 1, np.int64)
    np.add.at(rp, sr + 1, 1)
    np.cumsum(rp, out=rp)
    ri = cols_all[strict]
    # remove duplicate (row, col) pairs for the structural pass
    if ri.size:
        key = sr * n + ri
        keep = np.ones(ri.size, bool)
        keep[1:] = key[1:] != key[:-1]
        sr, ri = sr[keep], ri[keep]
        rp = np.zeros(n + 1, np.int64)
        np.add.at(rp, sr + 1, 1)
        np.cumsum(rp, out=rp)
    parent = K.etree(n, rp, ri)
    Lp, Li, Rp, Rj, Rpos = K.symbolic_factor(n, rp, ri, parent)
    return CholeskyFactor(n, perm, parent, Lp, Li, Rp, Rj, Rpos, ap, ai, asrc, S.nnz)


def fill_in(S: SparseSym, perm: Optional[Permutation] = None) -> int:
    """Number of strictly-lower entries of L that are structural zeros of S."""
    f = symbolic_cholesky(S, perm)
    n_lower_offdiag = np.unique(np.stack(S.edges()), axis=1).shape[1] if S.n_edges() else 0
    return (f.nnz - S.n) - n_lower_offdiag


def numeric_cholesky(Q: SparseSym, sym: CholeskyFactor, out: Optional[np.ndarray] = None) -> CholeskyFactor:
    """Numeric factor L with L L^T = Q[perm, perm] on the symbolic pattern.

    ``Q`` must have the storage layout the symbolic factor was built from.
    Raises NotPositiveDefinite(j) when a pivot is at or below
    1e-12 * max|diag(Q)|; ``j`` is the original column index.
    """
    if Q.nnz != sym.source_nnz or Q.n != sym.n:
        raise ValidationError("matrix layout does not match the symbolic factor")
    Lx = out if out is not None else np.empty(sym.nnz)
    dmax = np.max(np.abs(Q.diagonal())) if Q.n else 1.0
    code = K.numeric_factor(sym.n, sym.Lp, sym.Li, sym.Rp, sym.Rj, sym.Rpos, sym.ap, sym.ai, sym.asrc,
                            Q.values, PIVOT_RTOL * max(dmax, 1e-300), Lx)
    if code >= 0:
        raise NotPositiveDefinite(sym.perm.forward[code], float(Lx[sym.Lp[code]]))
    return sym.with_values(Lx)


def factor_values(sym: CholeskyFactor, values: np.ndarray, piv_tol: float, out: np.ndarray) -> int:
    """Low-level numeric factorisation used on hot paths; returns -1 or the failing permuted column."""
    return K.numeric_factor(sym.n, sym.Lp, sym.Li, sym.Rp, sym.Rj, sym.Rpos, sym.ap, sym.ai, sym.asrc,
                            values, piv_tol, out)


def solve_triangular(L: CholeskyFactor, b, side="lower") -> np.ndarray:
    """Forward (``lower``: L y = b) or backward (``upper``: L^T x = b) substitution.

    Works in the permuted index space of the factor.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (L.n,):
        raise ValidationError(f"right-hand side has shape {b.shape}, expected ({L.n},)")
    if L.Lx is None:
        raise ValidationError("factor has no numeric values")
    if side == "lower":
        return K.lsolve(L.n, L.Lp, L.Li, L.Lx, b)
    if side == "upper":
        return K.ltsolve(L.n, L.Lp, L.Li, L.Lx, b)
    raise ValidationError("side must be 'lower' or 'upper'")


def cholesky_solve(L: CholeskyFactor, b) -> np.ndarray:
    """Solve Q x = b in original indices using the factor of Q[perm, perm]."""
    b = np.asarray(b, dtype=float)
    pb = b[L.perm.forward]
    y = solve_triangular(L, pb, "lower")
    x = solve_triangular(L, y, "upper")
    out = np.empty_like(x)
    out[L.perm.forward] = x
    return out


def takahashi_values(L: CholeskyFactor) -> np.ndarray:
    """Selected inverse in the storage layout of ``L.Lx`` (permuted indices)."""
    return K.takahashi_mapped(L.n, L.Lp, L.Lx, *K.takahashi_map(L.n, L.Lp, L.Li))


def takahashi_selected_inverse(L: CholeskyFactor) -> SparseSym:
    """Entries of Q^{-1} on the pattern of L + L^T, in original indices."""
    if L.Lx is None:
        raise ValidationError("factor has no numeric values")
    Z = takahashi_values(L)
    f = L.perm.forward
    return SparseSym.from_coo(L.n, f[L.Li], f[L.col_indices()], Z, sum_duplicates=False)


# chordal graphs -------------------------------------------------------------

def chordal_complete(S_A: SparseSym, perm: Optional[Permutation] = None) -> SparseSym:
    """Chordal completion [S(L) + S(L^T)] mapped back through the permutation."""
    return symbolic_cholesky(S_A.pattern(), perm).pattern()


def mcs_order(G: SparseSym) -> np.ndarray:
    """Maximum cardinality search visit order (ties to the lowest index)."""
    n = G.n
    adj = G.adjacency()
    weight = np.zeros(n, np.int64)
    visited = np.zeros(n, bool)
    order = np.empty(n, np.int64)
    for k in range(n):
        w = np.where(visited, -1, weight)
        v = int(np.argmax(w))
        order[k] = v
        visited[v] = True
        for u in adj[v]:
            if not visited[u]:
                weight[u] += 1
    return order


def perfect_elimination_order(G: SparseSym) -> Optional[Permutation]:
    """A perfect elimination ordering, or None if G is not chordal."""
    if G.n == 0:
        return Permutation(np.zeros(0, np.int64))
    peo = Permutation(mcs_order(G)[::-1].copy())
    if fill_in(G.pattern(), peo) != 0:
        return None
    return peo


def is_chordal(G: SparseSym) -> bool:
    return perfect_elimination_order(G) is not None


@dataclass
class CliqueDecomposition:
    """Maximal cliques ordered so that ancestors in the junction tree come first.

    ``separators[k]`` is C_k intersected with the union of earlier cliques and
    ``residuals[k]`` is the rest of C_k.
    """

    n: int
    cliques: list
    separators: list
    residuals: list
    parents: list

    def __len__(self):
        return len(self.cliques)

    def sizes(self):
        return np.array([len(c) for c in self.cliques])


def clique_decomposition(G: SparseSym) -> CliqueDecomposition:
    """Junction tree of a chordal graph from its zero-fill symbolic factor."""
    n = G.n
    peo = perfect_elimination_order(G)
    if peo is None:
        raise NotChordal("graph is not chordal")
    sym = symbolic_cholesky(G.pattern(), peo)
    f = peo.forward
    counts = np.diff(sym.Lp)
    maximal = np.ones(n, bool)
    for c in range(n):
        p = sym.parent[c]
        if p >= 0 and counts[c] == counts[p] + 1:
            maximal[p] = False
    # later eliminated columns are closer to the junction tree root
    reps_desc = [j for j in range(n - 1, -1, -1) if maximal[j]]
    cliques, seps, ress, parents = [], [], [], []
    covered = np.zeros(n, bool)
    member_of = np.full(n, -1, np.int64)
    for k, j in enumerate(reps_desc):
        cols = sym.Li[sym.Lp[j]:sym.Lp[j + 1]]
        C = sorted(int(f[i]) for i in cols)
        S = [v for v in C if covered[v]]
        R = [v for v in C if not covered[v]]
        par = -1
        if S:
            Sset = set(S)
            cand = sorted({int(member_of[v]) for v in S})
            cand += [q for q in range(k) if q not in cand]
            for q in cand:
                if Sset <= set(cliques[q]):
                    par = q
                    break
            if par < 0:
                raise NotChordal("running intersection property violated")
        for v in R:
            covered[v] = True
            member_of[v] = k
        cliques.append(C)
        seps.append(S)
        ress.append(R)
        parents.append(par)
    if not covered.all():
        raise NotChordal("cliques do not cover all vertices")
    return CliqueDecomposition(n, cliques, seps, ress, parents)


# MatrixMarket ----------------------------------------------------------------

def write_matrix_market(path, S: SparseSym, comment: str = ""):
    """Symmetric coordinate format, lower triangle, values at full precision."""
    r, c, v = S.triplets()
    M = sp.coo_matrix((v, (r, c)), shape=(S.n, S.n))
    scipy.io.mmwrite(str(path), M, comment=comment, field="real", precision=17, symmetry="symmetric")


def read_matrix_market(path) -> SparseSym:
    M = scipy.io.mmread(str(path))
    M = sp.coo_matrix(M)
    keep = M.row >= M.col
    return SparseSym.from_coo(M.shape[0], M.row[keep], M.col[keep], M.data[keep], sum_duplicates=False)
