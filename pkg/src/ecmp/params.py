"""Structured variational Bayes for the transition parameters.

With a diagonal noise precision the rows of A decouple.  Each row has an
exact spike-and-slab posterior obtained by enumerating the inclusion
configurations of its candidate support; the noise precisions have Gamma
posteriors and the control matrix B a conjugate Gaussian posterior.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.special import digamma, gammaln

from .engine import Engine, EngineConfig
from .errors import (MissingEntry, NegativeRate, NonPSD, SupportTooLarge, ValidationError)
from .gaussian import TransitionMoments
from .models import Observations
from .sparse import SparseSym

log = logging.getLogger(__name__)

MAX_SUPPORT = 25
LOG2PI = np.log(2 * np.pi)


@dataclass
class PriorSpec:
    """Slab variance and inclusion probability for A, Gamma(k, tau) for q_ii,
    variance v_b for the entries of B and the initial-state prior N(m1, V1)
    (V1 diagonal, given by its diagonal or a scalar)."""

    v_slab: float = 1.0
    p_slab: float = 0.5
    k: float = 1.0
    tau: float = 1.0
    v_b: float = 1.0
    m1: Optional[np.ndarray] = None
    V1: object = 1.0

    def __post_init__(self):
        if not self.v_slab > 0 or not 0 < self.p_slab <= 1 or not self.k > 0 or not self.tau > 0 or not self.v_b > 0:
            raise ValidationError("prior variances and rates must be positive and p_slab in (0, 1]")

    def initial_state(self, n):
        m = np.zeros(n) if self.m1 is None else np.asarray(self.m1, float)
        v = np.broadcast_to(np.asarray(self.V1, float), (n,)).astype(float)
        if np.any(v <= 0):
            raise ValidationError("initial-state variances must be positive")
        return m, SparseSym.from_coo(n, np.arange(n), np.arange(n), 1.0 / v)


@dataclass
class RowPosterior:
    support: np.ndarray
    mean: np.ndarray
    second: np.ndarray
    incl: np.ndarray
    log_norm: float

    @property
    def cov(self):
        return self.second - np.outer(self.mean, self.mean)


@dataclass
class GammaPosterior:
    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise NegativeRate("Gamma parameters must be positive")

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def mean_log(self):
        return digamma(self.shape) - np.log(self.rate)

    def kl(self, k, tau):
        """KL(q || Gamma(k, tau)) summed over coordinates."""
        a, b = self.shape, self.rate
        return float(np.sum((a - k) * digamma(a) - gammaln(a) + gammaln(k) + k * (np.log(b) - np.log(tau))
                            + a * (tau - b) / b))


@dataclass
class BPosterior:
    """Gaussian posterior over vec(B) (column-major, n x m)."""

    mean: np.ndarray  # (n, m)
    cov: np.ndarray  # (nm, nm)

    @property
    def m(self):
        return self.mean.shape[1]

    def drift(self, U):
        return U @ self.mean.T

    def drift_second(self, U):
        """Per-transition E[(B u)(B u)^T] diagonals and full matrices."""
        n, m = self.mean.shape
        out = []
        for u in U:
            K = np.kron(u[None, :], np.eye(n))  # B u = K vec(B)
            d = self.mean @ u
            out.append(np.outer(d, d) + K @ self.cov @ K.T)
        return out


# row posteriors ------------------------------------------------------------------------

def row_blocks(stats, supports, row_ids=None):
    """Per-row (S_II, c_I): expected second moments and cross moments on each support.

    ``row_ids`` names the rows (defaults to 0..len(supports)-1).
    """
    row_ids = range(len(supports)) if row_ids is None else row_ids
    sizes = np.array([len(I) for I in supports])
    rr = np.concatenate([np.repeat(I, len(I)) for I in supports]) if sizes.sum() else np.zeros(0, np.int64)
    cc = np.concatenate([np.tile(I, len(I)) for I in supports]) if sizes.sum() else np.zeros(0, np.int64)
    pos = stats.xx.positions(rr, cc)
    if np.any(pos < 0):
        raise MissingEntry("second moments needed by a row update are missing")
    vals = stats.xx.values[pos]
    cross = sp.csr_matrix(stats.cross)
    out, off = [], 0
    for i, I in zip(row_ids, supports):
        k = len(I)
        S = vals[off:off + k * k].reshape(k, k)
        off += k * k
        c = np.asarray(cross[i, I].todense()).ravel() if k else np.zeros(0)
        out.append((S, c))
    return out


def assemble_row_gaussian(i, stats, EQ_ii, support, drift=None, block=None):
    """Natural parameters (h, Q) of the expected log-likelihood of row i of A.

    ``drift`` (T-1, n) holds E[B] u_t when controls are present.
    """
    I = np.asarray(support)
    if stats is None or stats.n_transitions == 0:
        return np.zeros(len(I)), np.zeros((len(I), len(I)))
    S, c = block if block is not None else row_blocks(stats, [I], [i])[0]
    if drift is not None:
        c = c - drift[:, i] @ stats.m0[:, I]
    return EQ_ii * c, EQ_ii * S


@njit(cache=True, nogil=True)
def _enumerate(h, Q, v, logp, log1mp):
    k = h.shape[0]
    best = -np.inf
    W = 0.0
    mean = np.zeros(k)
    second = np.zeros((k, k))
    incl = np.zeros(k)
    idx = np.empty(k, np.int64)
    L = np.zeros((k, k))
    for mask in range(1 << k):
        s = 0
        for j in range(k):
            if (mask >> j) & 1:
                idx[s] = j
                s += 1
        lw = s * logp
        if s < k:
            lw += (k - s) * log1mp
        if lw == -np.inf:
            continue
        # Cholesky of Q_SS + I / v
        for a in range(s):
            for b in range(a + 1):
                acc = Q[idx[a], idx[b]]
                if a == b:
                    acc += 1.0 / v
                for c in range(b):
                    acc -= L[a, c] * L[b, c]
                if a == b:
                    if acc <= 0.0:
                        return np.nan, mean, second, incl
                    L[a, a] = np.sqrt(acc)
                else:
                    L[a, b] = acc / L[b, b]
        logdet = 0.0
        for a in range(s):
            logdet += 2.0 * np.log(L[a, a])
        # mu = P^-1 h_S
        y = np.zeros(s)
        for a in range(s):
            acc = h[idx[a]]
            for c in range(a):
                acc -= L[a, c] * y[c]
            y[a] = acc / L[a, a]
        mu = np.zeros(s)
        for a in range(s - 1, -1, -1):
            acc = y[a]
            for c in range(a + 1, s):
                acc -= L[c, a] * mu[c]
            mu[a] = acc / L[a, a]
        quad = 0.0
        for a in range(s):
            quad += h[idx[a]] * mu[a]
        lw += -0.5 * s * np.log(v) - 0.5 * logdet + 0.5 * quad
        # P^-1 column by column
        Pinv = np.zeros((s, s))
        for e in range(s):
            z = np.zeros(s)
            for a in range(s):
                acc = 1.0 if a == e else 0.0
                for c in range(a):
                    acc -= L[a, c] * z[c]
                z[a] = acc / L[a, a]
            for a in range(s - 1, -1, -1):
                acc = z[a]
                for c in range(a + 1, s):
                    acc -= L[c, a] * Pinv[c, e]
                Pinv[a, e] = acc / L[a, a]
        if lw > best:
            scale = np.exp(best - lw) if best > -np.inf else 0.0
            W *= scale
            mean *= scale
            second *= scale
            incl *= scale
            best = lw
        w = np.exp(lw - best)
        W += w
        for a in range(s):
            mean[idx[a]] += w * mu[a]
            incl[idx[a]] += w
            for b in range(s):
                second[idx[a], idx[b]] += w * (Pinv[a, b] + mu[a] * mu[b])
    return best + np.log(W), mean / W, second / W, incl / W


def row_spike_slab_exact(h, Q, prior: PriorSpec, support=None) -> RowPosterior:
    """Exact posterior of one row under a Dirac-spike / Gaussian-slab prior.

    The target is p(a, z) exp(h^T a - a^T Q a / 2); ``log_norm`` is the log
    of its integral (summed over z).
    """
    h = np.asarray(h, float)
    Q = np.asarray(Q, float)
    k = h.shape[0]
    if k > MAX_SUPPORT:
        raise SupportTooLarge(f"support of size {k} exceeds {MAX_SUPPORT}")
    if Q.shape != (k, k):
        raise ValidationError("h and Q dimensions differ")
    support = np.arange(k) if support is None else np.asarray(support)
    if k == 0:
        return RowPosterior(support, np.zeros(0), np.zeros((0, 0)), np.zeros(0), 0.0)
    Qs = 0.5 * (Q + Q.T)
    ev = np.linalg.eigvalsh(Qs)
    if ev[0] < -1e-10 * max(1.0, abs(ev[-1])):
        raise NonPSD("row precision is not positive semi-definite")
    p = prior.p_slab
    logp = np.log(p)
    log1mp = np.log1p(-p) if p < 1 else -np.inf
    lz, mean, second, incl = _enumerate(h, np.ascontiguousarray(Qs), float(prior.v_slab), logp, log1mp)
    if not np.isfinite(lz):
        raise NonPSD("row posterior precision is not positive definite")
    second = 0.5 * (second + second.T)
    return RowPosterior(support, mean, second, incl, float(lz))


def row_kl(row: RowPosterior, h, Q):
    """KL(q || prior) for the row posterior with natural parameters (h, Q)."""
    return float(h @ row.mean - 0.5 * np.sum(Q * row.second) - row.log_norm)


# q_Q and q_B ---------------------------------------------------------------------------

def residual_second_moment(stats, rows, drift=None, drift_sq=None, blocks=None):
    """Diagonal of H_Q: sum_t E[(x_{t+1}^i - a_i x_t - d_t^i)^2] for every i."""
    H = stats.sq_next.copy()
    blocks = blocks or row_blocks(stats, [r.support for r in rows])
    for i, (r, (S, c)) in enumerate(zip(rows, blocks)):
        I = r.support
        if len(I) == 0:
            continue
        H[i] += -2.0 * r.mean @ c + np.sum(r.second * S)
        if drift is not None:
            H[i] += 2.0 * drift[:, i] @ (stats.m0[:, I] @ r.mean)
    if drift is not None:
        H -= 2.0 * np.sum(drift * stats.m1, axis=0)
    if drift_sq is not None:
        H += drift_sq
    return H


def update_q_gamma(stats, rows, prior: PriorSpec, drift=None, drift_sq=None, blocks=None) -> GammaPosterior:
    """Gamma posterior of each q_ii; one factor of 1/2 per observed transition."""
    H = residual_second_moment(stats, rows, drift, drift_sq, blocks)
    rate = prior.tau + 0.5 * H
    if np.any(rate <= 0):
        raise NegativeRate("Gamma rate became non-positive; inconsistent moments")
    shape = np.full(len(rows), prior.k + 0.5 * stats.n_transitions)
    return GammaPosterior(shape, rate)


def update_b_gaussian(stats, EA, EQ, U, v_b) -> BPosterior:
    """Conjugate posterior of vec(B): precision (sum u u^T) kron E[Q] + I / v_b."""
    n = EA.shape[0]
    U = np.asarray(U, float)
    if U.ndim != 2 or U.shape[0] != stats.n_transitions:
        raise ValidationError("controls must have shape (T-1, m)")
    m = U.shape[1]
    if m == 0:
        return BPosterior(np.zeros((n, 0)), np.zeros((0, 0)))
    Qd = EQ.to_dense() if isinstance(EQ, SparseSym) else np.asarray(EQ)
    R = stats.m1 - (EA @ stats.m0.T).T  # E[x_{t+1} - A x_t]
    P = np.kron(U.T @ U, Qd) + np.eye(n * m) / v_b
    rhs = (Qd @ R.T @ U).ravel(order="F")
    C = np.linalg.inv(P)
    C = 0.5 * (C + C.T)
    mean = (C @ rhs).reshape((n, m), order="F")
    return BPosterior(mean, C)


def b_kl(bp: BPosterior, v_b):
    k = bp.cov.shape[0]
    if k == 0:
        return 0.0
    mu = bp.mean.ravel(order="F")
    sign, logdet = np.linalg.slogdet(bp.cov)
    return float(0.5 * (np.trace(bp.cov) / v_b + mu @ mu / v_b - k + k * np.log(v_b) - logdet))


# expected transition products --------------------------------------------------------------

def expected_transition_products(rows, EQ_diag, n):
    """E[A] (csr) and E[A^T Q A] (SparseSym) for independent rows and diagonal E[Q]."""
    EQ_diag = np.asarray(EQ_diag, float)
    r_a, c_a, v_a = [], [], []
    r_q, c_q, v_q = [], [], []
    for i, r in enumerate(rows):
        I = r.support
        r_a.append(np.full(len(I), i))
        c_a.append(I)
        v_a.append(r.mean)
        rr, cc = np.meshgrid(I, I, indexing="ij")
        keep = rr >= cc
        r_q.append(rr[keep])
        c_q.append(cc[keep])
        v_q.append(EQ_diag[i] * r.second[keep])
    EA = sp.csr_matrix((np.concatenate(v_a), (np.concatenate(r_a), np.concatenate(c_a))), shape=(n, n))
    d = np.arange(n)
    M = SparseSym.from_coo(n, np.concatenate(r_q + [d]), np.concatenate(c_q + [d]),
                           np.concatenate(v_q + [np.zeros(n)]))
    return EA, M


def transition_moments(rows, gamma_mean, n, drift=None) -> TransitionMoments:
    EA, M = expected_transition_products(rows, gamma_mean, n)
    EQ = SparseSym.from_coo(n, np.arange(n), np.arange(n), np.asarray(gamma_mean, float))
    return TransitionMoments(EA, EQ, M, drift)


def point_rows(A, structure):
    """Point-mass row posteriors at the values of A on the given structure."""
    S = sp.csr_matrix(structure)
    A = sp.csr_matrix(A)
    rows = []
    for i in range(S.shape[0]):
        I = np.sort(S.indices[S.indptr[i]:S.indptr[i + 1]])
        a = np.asarray(A[i, I].todense()).ravel() if len(I) else np.zeros(0)
        rows.append(RowPosterior(I, a, np.outer(a, a), (a != 0).astype(float), 0.0))
    return rows


# outer loop -------------------------------------------------------------------------------

@dataclass
class LearnConfig:
    max_outer: int = 100
    outer_tol: float = 1e-6
    learn_Q: bool = True
    Q_fixed: Optional[np.ndarray] = None  # diagonal of Q when not learned
    row_damping: float = 1.0
    order: tuple = ("A", "Q", "B")

    def __post_init__(self):
        if self.max_outer < 0 or not self.outer_tol > 0 or not 0 < self.row_damping <= 1:
            raise ValidationError("invalid learning settings")
        self.order = tuple(self.order)
        if sorted(self.order) != ["A", "B", "Q"]:
            raise ValidationError("order must be a permutation of A, Q, B")


@dataclass
class LearnResult:
    marginals: object
    rows: list
    gamma: Optional[GammaPosterior]
    b: Optional[BPosterior]
    EQ_diag: np.ndarray
    diagnostics: list = field(default_factory=list)
    converged: bool = False
    engine: Optional[Engine] = None

    @property
    def EA(self):
        n = len(self.rows)
        return expected_transition_products(self.rows, self.EQ_diag, n)[0]

    def inclusion_matrix(self):
        n = len(self.rows)
        r = np.concatenate([np.full(len(x.support), i) for i, x in enumerate(self.rows)])
        c = np.concatenate([x.support for x in self.rows])
        v = np.concatenate([x.incl for x in self.rows])
        return sp.csr_matrix((v, (r, c)), shape=(n, n))

    def edge_table(self):
        """(i, j, p(z_ij = 1), E[a_ij]) for every candidate edge, row-major."""
        out = []
        for i, r in enumerate(self.rows):
            for j, p, a in zip(r.support, r.incl, r.mean):
                out.append((i, int(j), float(p), float(a)))
        return out

    def to_json(self):
        return json.dumps(dict(
            edges=[dict(i=i, j=j, p=p, a=a) for i, j, p, a in self.edge_table()],
            gamma=None if self.gamma is None else dict(shape=self.gamma.shape.tolist(), rate=self.gamma.rate.tolist()),
            EQ_diag=np.asarray(self.EQ_diag).tolist(),
            B=None if self.b is None else self.b.mean.tolist(),
            converged=self.converged,
            diagnostics=self.diagnostics), indent=1, sort_keys=True)


def vb_outer_loop(structure, obs: Observations, prior: PriorSpec, engine_config: Optional[EngineConfig] = None,
                  learn: Optional[LearnConfig] = None, U=None, A_init=None, free_energy=False) -> LearnResult:
    """Coordinate ascent q_X -> q_AZ -> q_Q (-> q_B).

    ``structure`` is the candidate pattern of A.  q_AZ starts as a point mass
    at ``A_init`` (zero by default) and q_Q at the prior mean (or at
    ``learn.Q_fixed``, in which case it is not updated).  With
    ``free_energy`` the variational lower bound is recorded after every q_X
    update from the second cycle on (exact for Gaussian observations and
    full messages).
    """
    ecfg = engine_config or EngineConfig()
    learn = learn or LearnConfig()
    S = sp.csr_matrix(structure, copy=True)
    S.data = np.ones_like(S.data)
    S.sort_indices()
    n = S.shape[0]
    T = obs.T
    supports = [S.indices[S.indptr[i]:S.indptr[i + 1]].copy() for i in range(n)]
    if max(len(I) for I in supports) > MAX_SUPPORT:
        raise SupportTooLarge(f"a row has more than {MAX_SUPPORT} candidate parents")
    rows = point_rows(A_init if A_init is not None else sp.csr_matrix((n, n)), S)
    learn_q = learn.learn_Q and learn.Q_fixed is None
    if learn.Q_fixed is not None:
        q_mean = np.broadcast_to(np.asarray(learn.Q_fixed, float), (n,)).copy()
    else:
        q_mean = np.full(n, prior.k / prior.tau)
    gamma = None
    U = None if U is None else np.asarray(U, float)[:T - 1]
    bpost = None if U is None else BPosterior(np.zeros((n, U.shape[1])), np.zeros((n * U.shape[1],) * 2))
    nats = None

    def drift_terms():
        if bpost is None:
            return None, 0.0, None
        sec = np.array([np.diag(M) for M in bpost.drift_second(U)])
        return bpost.drift(U), float(np.sum(sec * q_mean)), sec.sum(0)

    def install(eng=None):
        drift, quad, _ = drift_terms()
        tm = transition_moments(rows, q_mean, n, drift)
        logdet = float(np.sum(gamma.mean_log)) if gamma is not None else float(np.sum(np.log(q_mean)))
        if eng is None:
            eng = Engine(S, SparseSym.identity_pattern(n), obs, tm, prior.initial_state(n), ecfg)
        eng.set_transition(tm, log_det_Q=logdet, drift_quad=quad)
        return eng

    eng = install()
    diagnostics = []
    converged = False
    for it in range(learn.max_outer):
        t0 = time.perf_counter()
        rep = eng.run()
        out = eng.extract(stats=True, evidence=free_energy and nats is not None, consistency=False)
        stats = out["stats"]
        diag = dict(iteration=it, engine_rounds=rep.rounds, engine_converged=bool(rep.converged))
        if "log_evidence" in out:
            F = out["log_evidence"] - sum(row_kl(r, *nat) for r, nat in zip(rows, nats))
            if gamma is not None:
                F -= gamma.kl(prior.k, prior.tau)
            if bpost is not None:
                F -= b_kl(bpost, prior.v_b)
            diag["free_energy"] = float(F)
        old_mean = np.concatenate([r.mean for r in rows])
        old_q = q_mean.copy()
        old_b = None if bpost is None else bpost.mean.copy()
        if not rep.converged:
            log.warning("VB cycle %d: message passing stopped after %d rounds without converging", it, rep.rounds)
        blocks = row_blocks(stats, supports)
        drift, _, dsq = drift_terms()
        for step in learn.order:
            if step == "A":
                new_nats = []
                for i in range(n):
                    h, Qt = assemble_row_gaussian(i, stats, q_mean[i], supports[i], drift, blocks[i])
                    if nats is not None and learn.row_damping < 1:
                        h = nats[i][0] + learn.row_damping * (h - nats[i][0])
                        Qt = nats[i][1] + learn.row_damping * (Qt - nats[i][1])
                    new_nats.append((h, Qt))
                nats = new_nats
                rows = [row_spike_slab_exact(h, Qt, prior, supports[i]) for i, (h, Qt) in enumerate(nats)]
            elif step == "Q" and learn_q:
                gamma = update_q_gamma(stats, rows, prior, drift, dsq, blocks)
                q_mean = gamma.mean
            elif step == "B" and bpost is not None:
                EA, _ = expected_transition_products(rows, q_mean, n)
                bpost = update_b_gaussian(stats, EA, np.diag(q_mean), U, prior.v_b)
                drift, _, dsq = drift_terms()
        install(eng)
        new_mean = np.concatenate([r.mean for r in rows])
        scale = max(np.max(np.abs(new_mean)) if new_mean.size else 0.0, 1e-12)
        change = float(np.max(np.abs(new_mean - old_mean)) / scale) if new_mean.size else 0.0
        change = max(change, float(np.max(np.abs(q_mean - old_q) / q_mean)))
        if bpost is not None and bpost.mean.size:
            bscale = max(np.max(np.abs(bpost.mean)), 1e-12)
            change = max(change, float(np.max(np.abs(bpost.mean - old_b)) / bscale))
        diag.update(change=change, seconds=time.perf_counter() - t0)
        diagnostics.append(diag)
        log.info("VB cycle %d: change %.3e, engine rounds %d", it, change, rep.rounds)
        if change < learn.outer_tol:
            converged = True
            break
    if not converged and learn.max_outer > 0:
        log.warning("VB stopped after %d cycles without reaching the outer tolerance", learn.max_outer)
    eng.run()
    return LearnResult(eng.marginals(), rows, gamma, bpost, q_mean, diagnostics, converged, eng)
