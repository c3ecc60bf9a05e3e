"""Compiled inner loops for the sparse Cholesky machinery.

All kernels work on a permuted lower-triangular pattern held in
compressed-column form (``Lp``, ``Li``), with the diagonal stored first in
every column and row indices increasing.  The kernels release the GIL so that
independent factorisations can run on worker threads.
"""
import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def etree(n, rp, ri):
    """Elimination tree from the strict lower pattern given row-wise.

    ``rp``/``ri`` list, for each row k, the columns j < k with A[k, j] != 0.
    """
    parent = -np.ones(n, np.int64)
    ancestor = -np.ones(n, np.int64)
    for k in range(n):
        for p in range(rp[k], rp[k + 1]):
            i = ri[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@njit(**_OPTS)
def symbolic_factor(n, rp, ri, parent):
    """Column and row patterns of L from the row-wise strict lower pattern.

    Returns ``Lp, Li`` (column pattern, diagonal first) and ``Rp, Rj, Rpos``:
    for each row k the off-diagonal columns j of L[k, :] in increasing order
    together with the storage position of L[k, j] in ``Li``.
    """
    mark = -np.ones(n, np.int64)
    counts = np.ones(n, np.int64)
    rcount = np.zeros(n, np.int64)
    # first pass: counts
    for k in range(n):
        mark[k] = k
        for p in range(rp[k], rp[k + 1]):
            i = ri[p]
            while i != -1 and mark[i] != k:
                mark[i] = k
                counts[i] += 1
                rcount[k] += 1
                i = parent[i]
    Lp = np.zeros(n + 1, np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    Rp = np.zeros(n + 1, np.int64)
    for k in range(n):
        Rp[k + 1] = Rp[k] + rcount[k]
    Li = np.empty(Lp[n], np.int64)
    Rj = np.empty(Rp[n], np.int64)
    Rpos = np.empty(Rp[n], np.int64)
    nxt = Lp[:n].copy()
    mark[:] = -1
    for k in range(n):
        Li[nxt[k]] = k
        nxt[k] += 1
        mark[k] = k
        top = Rp[k]
        for p in range(rp[k], rp[k + 1]):
            i = ri[p]
            while i != -1 and mark[i] != k:
                mark[i] = k
                Rj[top] = i
                top += 1
                i = parent[i]
        seg = np.sort(Rj[Rp[k]:Rp[k + 1]])
        for q in range(seg.shape[0]):
            j = seg[q]
            Rj[Rp[k] + q] = j
            Rpos[Rp[k] + q] = nxt[j]
            Li[nxt[j]] = k
            nxt[j] += 1
    return Lp, Li, Rp, Rj, Rpos


@njit(**_OPTS)
def numeric_factor(n, Lp, Li, Rp, Rj, Rpos, ap, ai, asrc, vals, piv_tol, Lx):
    """Up-looking Cholesky into the preallocated ``Lx``.

    Row k of the permuted lower triangle is read from ``vals[asrc[e]]`` for
    ``e`` in ``ap[k]:ap[k+1]`` with column ``ai[e]`` (diagonal included).
    Returns -1 on success or the failing column index.
    """
    x = np.zeros(n)
    for k in range(n):
        for e in range(ap[k], ap[k + 1]):
            x[ai[e]] += vals[asrc[e]]
        d = x[k]
        x[k] = 0.0
        for q in range(Rp[k], Rp[k + 1]):
            j = Rj[q]
            lkj = x[j] / Lx[Lp[j]]
            x[j] = 0.0
            end = Rpos[q]
            for p in range(Lp[j] + 1, end):
                x[Li[p]] -= Lx[p] * lkj
            d -= lkj * lkj
            Lx[end] = lkj
        if not d > piv_tol:
            Lx[Lp[k]] = d
            return k
        Lx[Lp[k]] = np.sqrt(d)
    return -1


@njit(**_OPTS)
def lsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    return x


@njit(**_OPTS)
def ltsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s / Lx[Lp[j]]
    return x


@njit(**_OPTS)
def ltmul(n, Lp, Li, Lx, v):
    """Return L^T v."""
    out = np.zeros(n)
    for j in range(n):
        s = 0.0
        for p in range(Lp[j], Lp[j + 1]):
            s += Lx[p] * v[Li[p]]
        out[j] = s
    return out


@njit(**_OPTS)
def takahashi_map(n, Lp, Li):
    """Symbolic part of ``takahashi_mapped``: for every strict entry pk = (k, j)
    of L, the positions p in column k (from the diagonal down) whose row lies
    in the pattern of column j, and the position of that row in column j.

    Returns (tp, tpos, tslot) with the pairs of entry pk in tp[pk]:tp[pk+1].
    """
    slot = -np.ones(n, np.int64)
    nnz = Lp[n]
    tp = np.zeros(nnz + 1, np.int64)
    for j in range(n):
        p0, p1 = Lp[j], Lp[j + 1]
        last = Li[p1 - 1]
        for p in range(p0 + 1, p1):
            slot[Li[p]] = p
        for pk in range(p0 + 1, p1):
            k = Li[pk]
            c = 0
            for p in range(Lp[k], Lp[k + 1]):
                i = Li[p]
                if i > last:
                    break
                if slot[i] >= 0:
                    c += 1
            tp[pk + 1] = c
        for p in range(p0 + 1, p1):
            slot[Li[p]] = -1
    for q in range(nnz):
        tp[q + 1] += tp[q]
    tpos = np.empty(tp[nnz], np.int32)
    tslot = np.empty(tp[nnz], np.int32)
    for j in range(n):
        p0, p1 = Lp[j], Lp[j + 1]
        last = Li[p1 - 1]
        for p in range(p0 + 1, p1):
            slot[Li[p]] = p
        for pk in range(p0 + 1, p1):
            k = Li[pk]
            e = tp[pk]
            for p in range(Lp[k], Lp[k + 1]):
                i = Li[p]
                if i > last:
                    break
                if slot[i] >= 0:
                    tpos[e] = p
                    tslot[e] = slot[i]
                    e += 1
        for p in range(p0 + 1, p1):
            slot[Li[p]] = -1
    return tp, tpos, tslot


@njit(**_OPTS)
def takahashi_mapped(n, Lp, Lx, tp, tpos, tslot):
    """Entries of (L L^T)^{-1} on the pattern of L, in the layout of ``Lx``.

    Columns are processed in reverse order.  For column j with strict pattern
    P_j the recursion is Z_ij = -(1/L_jj) sum_{k in P_j} L_kj Z_ik and
    Z_jj = 1/L_jj^2 - (1/L_jj) sum_{k in P_j} L_kj Z_kj.  The needed Z_ik with
    i, k in P_j sit in column min(i, k), which contains max(i, k) because the
    pattern is closed under the elimination tree; their positions come from
    ``takahashi_map``.
    """
    Z = np.zeros(Lx.shape[0])
    acc = np.zeros(Lx.shape[0])
    for j in range(n - 1, -1, -1):
        p0 = Lp[j]
        p1 = Lp[j + 1]
        ljj = Lx[p0]
        for p in range(p0 + 1, p1):
            acc[p] = 0.0
        for pk in range(p0 + 1, p1):
            lkj = Lx[pk]
            diag_k = tpos[tp[pk]]  # the first pair is Z_kk
            for e in range(tp[pk], tp[pk + 1]):
                p = tpos[e]
                si = tslot[e]
                z = Z[p]
                acc[si] += lkj * z
                if p != diag_k:
                    acc[pk] += Lx[si] * z
        s = 0.0
        for p in range(p0 + 1, p1):
            zij = -acc[p] / ljj
            Z[p] = zij
            s += Lx[p] * zij
        Z[p0] = 1.0 / (ljj * ljj) - s / ljj
    return Z
