"""Expectation-constrained message passing for dynamic latent Gaussian models.

The chain x_0 -> x_1 -> ... -> x_{T-1} is handled through two-slice
marginals over (x_s, x_{s+1}), s = 0..T-2.  Slice s receives the forward
message alpha_s (or the initial-state prior when s = 0), the backward message
beta_{s+1}, the exact Gaussian observation terms and the site approximations
lam0 of the times it owns.  Time t >= 1 is owned by slice t - 1, time 0 by
slice 0.  Forward and backward messages have precisions restricted to the
message structure G; they are obtained by projecting a univariate-block
marginal onto the Gaussians with precision on G and dividing out the
message coming from the other side.
"""
from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import (MissingEntry, NotPositiveDefinite, RuntimeFailure, SingularSeparator, ValidationError)
from .gaussian import (LOG2PI, ChordalProjector, DenseProjector, DenseTwoSlicePlan, SparseTwoSlicePlan,
                       TransitionMoments, structural_product_pattern)
from .models import Observations
from .sites import expcox_tilted_batch, site_update_batch, _rules
from .sparse import (PIVOT_RTOL, SparseSym, amd_order, chordal_complete, cholesky_solve, factor_values,
                     rcm_order, symbolic_cholesky)

log = logging.getLogger(__name__)

SCHEDULES = ("sequential", "static", "dynamic", "filter")


# message structures -----------------------------------------------------------------

def parse_family(family: str):
    """'diag', 'tsp', 'full', 'chordal:amd', 'chordal:rcm', 'chordal:natural' or 'band:k'."""
    if family in ("diag", "tsp", "full"):
        return family, None
    kind, _, arg = family.partition(":")
    if kind == "chordal" and arg in ("amd", "rcm", "natural"):
        return kind, arg
    if kind == "band":
        try:
            k = int(arg)
        except ValueError:
            k = -1
        if k >= 0:
            return kind, k
    raise ValidationError(f"unknown message family {family!r}")


def symmetric_pattern(A) -> SparseSym:
    """Symmetrised structure of A (stored entries, explicit zeros included) plus the diagonal."""
    A = sp.coo_matrix(A)
    n = A.shape[0]
    r = np.concatenate([A.row, A.col, np.arange(n)])
    c = np.concatenate([A.col, A.row, np.arange(n)])
    lo, hi = np.maximum(r, c), np.minimum(r, c)
    key = np.unique(lo * n + hi)
    return SparseSym.from_coo(n, key // n, key % n, sum_duplicates=False)


def maximum_spanning_forest(n, rows, cols, weights):
    """Kruskal on the given undirected edges; ties broken by edge index.

    Returns the indices of the selected edges.
    """
    order = np.lexsort((np.arange(len(weights)), -np.asarray(weights, float)))
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    chosen = []
    for e in order:
        a, b = find(rows[e]), find(cols[e])
        if a != b:
            parent[a] = b
            chosen.append(int(e))
            if len(chosen) == n - 1:
                break
    return np.array(sorted(chosen), dtype=np.int64)


def build_message_structure(S_A, family: str, A=None) -> SparseSym:
    """Pattern G (diagonal included) for the forward/backward message precisions.

    ``S_A`` is the transition structure (scipy sparse or SparseSym); ``A``
    supplies the weights |A_ij| + |A_ji| for the spanning-tree family.
    """
    kind, arg = parse_family(family)
    S = S_A if isinstance(S_A, SparseSym) else symmetric_pattern(S_A)
    n = S.n
    d = np.arange(n)
    if kind == "diag" or (kind == "band" and arg == 0):
        return SparseSym.identity_pattern(n)
    if kind == "full":
        return SparseSym.complete(n)
    if kind == "band":
        r, c = np.tril_indices(n)
        keep = r - c <= arg
        return SparseSym.from_coo(n, r[keep], c[keep], sum_duplicates=False)
    if kind == "tsp":
        er, ec = S.edges()
        if A is None:
            w = np.ones(len(er))
        else:
            Ad = sp.csr_matrix(A)
            w = np.abs(np.asarray(Ad[er, ec]).ravel()) + np.abs(np.asarray(Ad[ec, er]).ravel())
        sel = maximum_spanning_forest(n, er, ec, w)
        return SparseSym.from_coo(n, np.concatenate([er[sel], d]), np.concatenate([ec[sel], d]),
                                  sum_duplicates=False)
    if arg == "amd":
        perm = amd_order(S)
    elif arg == "rcm":
        perm = rcm_order(S)
    else:
        perm = None
    return chordal_complete(S, perm)


# state, results ---------------------------------------------------------------------

@dataclass
class EngineConfig:
    family: str = "chordal:amd"
    schedule: str = "sequential"
    k: int = 1  # concurrent slice updates for the dynamic schedule
    tol: float = 1e-8
    max_iters: int = 200
    damping: float = 1.0
    power: float = 1.0
    gh_nodes: int = 32
    site_rule: str = "laplace"  # laplace | cascade
    inner_iters: int = 20
    max_halvings: int = 5
    ordering: str = "amd"

    def __post_init__(self):
        parse_family(self.family)
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if not self.tol > 0 or self.max_iters < 0 or self.k < 1 or self.inner_iters < 0:
            raise ValidationError("invalid tolerance or iteration limits")
        if not 0 < self.damping <= 1 or not 0 < self.power <= 1:
            raise ValidationError("damping and power must lie in (0, 1]")
        if self.site_rule not in ("laplace", "cascade"):
            raise ValidationError("site_rule must be 'laplace' or 'cascade'")


@dataclass
class MessageState:
    """Canonical parameters of all messages.

    alpha_*[t] is the forward message into x_t (t >= 1), beta_*[t] the
    backward message into x_t (t <= T-2); precisions are stored as values on
    G.  lam0_* are the site approximations, laml_* the leave-one-out
    messages the sites last saw.
    """

    G: SparseSym
    family: str
    alpha_h: np.ndarray
    alpha_q: np.ndarray
    beta_h: np.ndarray
    beta_q: np.ndarray
    lam0_h: np.ndarray
    lam0_q: np.ndarray
    laml_h: np.ndarray
    laml_q: np.ndarray
    mag_alpha: np.ndarray = None
    mag_beta: np.ndarray = None
    mag_site: np.ndarray = None

    @classmethod
    def zeros(cls, T, n, G: SparseSym, family: str):
        g = G.nnz
        z = lambda *s: np.zeros(s)
        return cls(G.pattern(), family, z(T, n), z(T, g), z(T, n), z(T, g), z(T, n), z(T, n), z(T, n), z(T, n),
                   z(T), z(T), z(T))

    @property
    def T(self):
        return self.alpha_h.shape[0]

    @property
    def n(self):
        return self.alpha_h.shape[1]

    def copy(self):
        return MessageState(self.G, self.family, *[getattr(self, k).copy() for k in _ARRAYS])


_ARRAYS = ("alpha_h", "alpha_q", "beta_h", "beta_q", "lam0_h", "lam0_q", "laml_h", "laml_q", "mag_alpha",
           "mag_beta", "mag_site")


@dataclass
class SmoothedMarginals:
    """Per-time marginals taken from the owning slice."""

    mean: np.ndarray  # (T, n)
    var: np.ndarray  # (T, n)
    cov_G: np.ndarray  # (T, nnz(G)) covariance entries on the message structure
    G: SparseSym
    slice_mean: np.ndarray = None  # (T-1, 2n)


@dataclass
class SufficientStats:
    """Transition statistics accumulated over the T-1 two-slice marginals.

    xx: sum_s E[x_s x_s^T] on the lower pattern of S^T S; cross: csr on S
    with sum_s E[x_{s+1}^i x_s^j]; sq_next: sum_s E[(x_{s+1}^i)^2];
    m0/m1: per-slice means of x_s and x_{s+1}.
    """

    xx: SparseSym
    cross: sp.csr_matrix
    sq_next: np.ndarray
    m0: np.ndarray
    m1: np.ndarray

    @property
    def n_transitions(self):
        return self.m0.shape[0]


@dataclass
class ConvergenceReport:
    converged: bool
    rounds: int
    slice_updates: int
    history: list
    timings: dict
    damped: int = 0
    skipped: int = 0
    site_failures: int = 0
    schedule: str = "sequential"

    def to_dict(self):
        return dict(converged=self.converged, rounds=self.rounds, slice_updates=self.slice_updates,
                    history=[float(h) for h in self.history], timings=dict(self.timings), damped=self.damped,
                    skipped=self.skipped, site_failures=self.site_failures, schedule=self.schedule)


@dataclass
class _Work:
    vals: np.ndarray
    h: np.ndarray
    Lx: Optional[np.ndarray]
    timings: dict = field(default_factory=lambda: dict(temporal=0.0, linalg=0.0, sites=0.0))
    damped: int = 0
    skipped: int = 0
    site_failures: int = 0


@dataclass
class _SliceResult:
    s: int
    ok: bool
    mag_alpha: float = 0.0
    mag_beta: float = 0.0
    mag_site: float = 0.0
    site_residual: float = 0.0


# the engine ---------------------------------------------------------------------------

class Engine:
    """Message passing on a fixed model, data set and message structure.

    ``structure`` is the transition pattern (scipy sparse, the candidate
    structure when A is learned); ``prior`` is (m, Q) of x_0 with Q a
    SparseSym; ``tm`` holds the transition expectations.
    """

    def __init__(self, structure, Q_pattern: SparseSym, obs: Observations, tm: TransitionMoments,
                 prior, config: Optional[EngineConfig] = None, G: Optional[SparseSym] = None):
        self.cfg = config or EngineConfig()
        self.structure = sp.csr_matrix(structure)
        self.structure.sort_indices()
        self.n = self.structure.shape[0]
        self.T = obs.T
        if self.T < 2:
            raise ValidationError("message passing needs at least two time points")
        if obs.n != self.n or tm.n != self.n:
            raise ValidationError("observation, transition and structure dimensions differ")
        self.obs = obs
        self.Q_pattern = Q_pattern.pattern()
        self.prior_m = np.asarray(prior[0], float)
        self.prior_Q = prior[1]
        kind, _ = parse_family(self.cfg.family)
        if G is None:
            G = build_message_structure(self.structure, self.cfg.family, tm.EA)
        self.G = G.pattern()
        if kind == "full":
            self.plan = DenseTwoSlicePlan(self.n)
            self.projector = DenseProjector(self.n)
            self.G = self.projector.G
        else:
            self.plan = SparseTwoSlicePlan(self.n, self.structure, self.Q_pattern, self.G,
                                           prior_pattern=self.prior_Q, ordering=self.cfg.ordering)
            self.projector = ChordalProjector(self.G)
        self._prior_vals = self.plan.prior_values(self.prior_Q)
        self._prior_h = self.prior_Q.matvec(self.prior_m)
        self.has_sites = bool(np.any(obs.eta > 0))
        self._site_t = np.flatnonzero(np.any(obs.eta > 0, axis=1))
        self.rules = _rules(self.cfg.gh_nodes)
        self.state = MessageState.zeros(self.T, self.n, self.G, self.cfg.family)
        self._prev = None
        self._stat_pos = None
        self._gfac = None
        self.set_transition(tm)
        self._initialise_alpha()

    # model expectations ---------------------------------------------------------

    def set_transition(self, tm: TransitionMoments, log_det_Q: Optional[float] = None, drift_quad: float = None):
        """Install new transition expectations (the learning loop calls this each cycle)."""
        self.tm = tm
        self._base = self.plan.base_values(tm)
        n, T = self.n, self.T
        self._hu1 = np.zeros((T - 1, n))
        self._hu2 = np.zeros((T - 1, n))
        if tm.drift is not None:
            d = np.asarray(tm.drift, float)
            if d.shape != (T - 1, n):
                raise ValidationError("drift must have shape (T-1, n)")
            Qd = np.stack([tm.EQ.matvec(x) for x in d])
            self._hu2 = Qd
            self._hu1 = -(tm.EA.T @ Qd.T).T
            default_quad = float(np.sum(Qd * d))
        else:
            default_quad = 0.0
        if log_det_Q is None:
            log_det_Q = _logdet_sparse(tm.EQ)
        self.log_det_Q = float(log_det_Q)
        self.drift_quad = default_quad if drift_quad is None else float(drift_quad)

    # assembly and factorisation --------------------------------------------------------

    def _add_G(self, v, q, block):
        if self.plan.dense:
            self.plan.add_G(v, q, block)
        elif block == 1:
            v[self.plan.dst_G1] += q
        else:
            v[self.plan.dst_G2] += q

    def _assemble(self, s, ws: _Work, data=True, beta=True):
        st, obs, n = self.state, self.obs, self.n
        v, h = ws.vals, ws.h
        v[:] = self._base
        h[:n] = self._hu1[s]
        h[n:] = self._hu2[s]
        if s == 0:
            v += self._prior_vals
            h[:n] += self._prior_h
            if data:
                v[self.plan.dst_d1] += obs.prec[0] + st.lam0_q[0]
                h[:n] += obs.lin[0] + st.lam0_h[0]
        else:
            self._add_G(v, st.alpha_q[s], 1)
            h[:n] += st.alpha_h[s]
        if beta and s + 1 <= self.T - 2:
            self._add_G(v, st.beta_q[s + 1], 2)
            h[n:] += st.beta_h[s + 1]
        if data:
            v[self.plan.dst_d2] += obs.prec[s + 1] + st.lam0_q[s + 1]
            h[n:] += obs.lin[s + 1] + st.lam0_h[s + 1]

    def _factor(self, s, ws: _Work, data=True, beta=True, guard=True):
        """Assemble and factor slice s; on failure shrink the incoming updates.

        Returns the factor or None when the update has to be skipped.
        """
        halvings = self.cfg.max_halvings if guard else 0
        for attempt in range(halvings + 2):
            self._assemble(s, ws, data, beta)
            scale = max(np.max(np.abs(ws.vals[self.plan.dst_d1])), np.max(np.abs(ws.vals[self.plan.dst_d2])), 1e-300)
            code, L = self.plan.factor(ws.vals, scale, out=ws.Lx)
            if code < 0:
                return L
            if not guard or self._prev is None or attempt > halvings:
                break
            keep = 0.5 if attempt < halvings else 0.0
            self._shrink_incoming(s, keep)
            ws.damped += 1
        return None

    def _shrink_incoming(self, s, keep):
        st, pv = self.state, self._prev
        if s >= 1:
            st.alpha_h[s] = pv.alpha_h[s] + keep * (st.alpha_h[s] - pv.alpha_h[s])
            st.alpha_q[s] = pv.alpha_q[s] + keep * (st.alpha_q[s] - pv.alpha_q[s])
        if s + 1 <= self.T - 2:
            st.beta_h[s + 1] = pv.beta_h[s + 1] + keep * (st.beta_h[s + 1] - pv.beta_h[s + 1])
            st.beta_q[s + 1] = pv.beta_q[s + 1] + keep * (st.beta_q[s + 1] - pv.beta_q[s + 1])
        for t in self._owned(s):
            st.lam0_h[t] = pv.lam0_h[t] + keep * (st.lam0_h[t] - pv.lam0_h[t])
            st.lam0_q[t] = pv.lam0_q[t] + keep * (st.lam0_q[t] - pv.lam0_q[t])

    @staticmethod
    def _owned(s):
        return (0, 1) if s == 0 else (s + 1,)

    def _work(self):
        N = self.plan.size
        return _Work(np.empty(N), np.empty(2 * self.n),
                     None if self.plan.dense else np.empty(self.plan.sym.nnz))

    # local updates ---------------------------------------------------------------------

    def _update_sites(self, s, m, d1, d2, ws: _Work):
        st, obs, n, cfg = self.state, self.obs, self.n, self.cfg
        mag = 0.0
        for t in self._owned(s):
            eta = obs.eta[t]
            if not np.any(eta > 0):
                continue
            mean, var = (m[:n], d1) if (s == 0 and t == 0) else (m[n:], d2)
            nh, nq, lh, lq, _, status = site_update_batch(mean, var, st.lam0_h[t], st.lam0_q[t], eta, cfg.power,
                                                          cfg.damping, cfg.gh_nodes, cfg.site_rule == "cascade")
            ws.site_failures += int(np.count_nonzero(status > 2))
            dm = max(np.max(np.abs(nh - st.lam0_h[t])), np.max(np.abs(nq - st.lam0_q[t])))
            if self._prev is not None:
                self._prev.lam0_h[t] = st.lam0_h[t]
                self._prev.lam0_q[t] = st.lam0_q[t]
            st.lam0_h[t], st.lam0_q[t] = nh, nq
            st.laml_h[t], st.laml_q[t] = lh, lq
            mag = max(mag, dm)
        return mag

    def _project(self, V, mean, ws):
        t0 = time.perf_counter()
        try:
            h, q = self.projector.project_values(np.ascontiguousarray(V), mean)
        except SingularSeparator:
            h = q = None
        ws.timings["temporal"] += time.perf_counter() - t0
        return h, q

    def update_slice(self, s, ws: Optional[_Work] = None, messages=True, sites=True, forward_only=False,
                     data=True) -> _SliceResult:
        """One two-slice update: sites of the owned times, then the outgoing messages."""
        ws = ws or self._work()
        st, n, cfg = self.state, self.n, self.cfg
        res = _SliceResult(s, True)
        do_sites = sites and data and self.has_sites and any(t in self._site_t for t in self._owned(s))
        inner = cfg.inner_iters if do_sites else 0
        for it in range(inner + 1):
            t0 = time.perf_counter()
            L = self._factor(s, ws, data=data, beta=not forward_only)
            if L is None:
                ws.timings["linalg"] += time.perf_counter() - t0
                ws.skipped += 1
                res.ok = False
                return res
            m, V1, V2, d1, d2, _ = self.plan.moments(L, ws.h)
            ws.timings["linalg"] += time.perf_counter() - t0
            if not do_sites or it == inner:
                break
            t0 = time.perf_counter()
            dm = self._update_sites(s, m, d1, d2, ws)
            ws.timings["sites"] += time.perf_counter() - t0
            res.mag_site = max(res.mag_site, dm)
            res.site_residual = dm
            if dm <= cfg.tol:
                res.site_residual = 0.0
                break
        if not messages:
            return res
        eps = cfg.damping if data else 1.0  # the data-free initial sweep is never damped
        h2, q2 = self._project(V2, m[n:], ws)
        if h2 is not None:
            bh = st.beta_h[s + 1] if (s + 1 <= self.T - 2 and not forward_only) else 0.0
            bq = st.beta_q[s + 1] if (s + 1 <= self.T - 2 and not forward_only) else 0.0
            res.mag_alpha = self._write(st.alpha_h, st.alpha_q, s + 1, h2 - bh, q2 - bq, eps,
                                        None if self._prev is None else (self._prev.alpha_h, self._prev.alpha_q))
        else:
            ws.skipped += 1
        if s >= 1 and not forward_only:
            h1, q1 = self._project(V1, m[:n], ws)
            if h1 is not None:
                res.mag_beta = self._write(st.beta_h, st.beta_q, s, h1 - st.alpha_h[s], q1 - st.alpha_q[s], eps,
                                           None if self._prev is None else (self._prev.beta_h, self._prev.beta_q))
            else:
                ws.skipped += 1
        return res

    @staticmethod
    def _write(H, Qv, t, h, q, eps, prev):
        if eps < 1.0:
            h = H[t] + eps * (h - H[t])
            q = Qv[t] + eps * (q - Qv[t])
        mag = max(np.max(np.abs(h - H[t])), np.max(np.abs(q - Qv[t])))
        if prev is not None:
            prev[0][t] = H[t]
            prev[1][t] = Qv[t]
        H[t] = h
        Qv[t] = q
        return float(mag)

    def _initialise_alpha(self):
        """Data-free forward propagation of the prior into the forward messages."""
        ws = self._work()
        for s in range(self.T - 1):
            res = self.update_slice(s, ws, sites=False, forward_only=True, data=False)
            if not res.ok:
                raise NotPositiveDefinite(-1)
        self.state.mag_alpha[:] = 0.0

    # schedules -------------------------------------------------------------------------

    def run(self, schedule: Optional[str] = None, tol: Optional[float] = None, max_iters: Optional[int] = None,
            k: Optional[int] = None) -> ConvergenceReport:
        cfg = self.cfg
        schedule = schedule or cfg.schedule
        tol = cfg.tol if tol is None else tol
        max_iters = cfg.max_iters if max_iters is None else max_iters
        k = k or cfg.k
        self._prev = self.state.copy()
        t_start = time.perf_counter()
        if np.isinf(tol) and schedule != "filter":
            out = (True, 0, 0, [], [])
        elif schedule == "sequential":
            out = self._run_sequential(tol, max_iters)
        elif schedule == "static":
            out = self._run_static(tol, max_iters)
        elif schedule == "dynamic":
            out = self._run_dynamic(tol, max_iters, k)
        elif schedule == "filter":
            out = self._run_filter()
        else:
            raise ValidationError(f"unknown schedule {schedule!r}")
        converged, rounds, updates, history, works = out
        timings = dict(temporal=0.0, linalg=0.0, sites=0.0)
        for w in works:
            for key in timings:
                timings[key] += w.timings[key]
        total = time.perf_counter() - t_start
        timings["overhead"] = max(0.0, total - sum(timings.values()))
        timings["total"] = total
        rep = ConvergenceReport(converged, rounds, updates, history, timings,
                                damped=sum(w.damped for w in works), skipped=sum(w.skipped for w in works),
                                site_failures=sum(w.site_failures for w in works), schedule=schedule)
        if not converged:
            log.warning("message passing stopped after %d rounds without reaching tol %.1e", rounds, tol)
        return rep

    def _record(self, res: _SliceResult):
        st = self.state
        s = res.s
        if s + 1 <= self.T - 1:
            st.mag_alpha[s + 1] = res.mag_alpha
        if s >= 1:
            st.mag_beta[s] = res.mag_beta
        for t in self._owned(s):
            st.mag_site[t] = res.mag_site

    def _round_mag(self, res: _SliceResult):
        m = res.mag_site
        if res.s + 1 <= self.T - 2:
            m = max(m, res.mag_alpha)
        if res.s >= 1:
            m = max(m, res.mag_beta)
        return m

    def _run_sequential(self, tol, max_iters):
        ws = self._work()
        S = self.T - 1
        order = list(range(S)) + list(range(S - 2, -1, -1))
        history, updates = [], 0
        for r in range(max_iters):
            mag = 0.0
            for s in order:
                res = self.update_slice(s, ws)
                self._record(res)
                updates += 1
                mag = max(mag, self._round_mag(res), res.site_residual)
            history.append(mag)
            if mag < tol:
                return True, r + 1, updates, history, [ws]
        return False, len(history), updates, history, [ws]

    def _run_static(self, tol, max_iters):
        ws = self._work()
        S = self.T - 1
        order = list(range(S)) + list(range(S - 2, -1, -1))
        history, updates = [], 0
        for r in range(max_iters):
            mag_msg = np.inf
            for _ in range(max_iters):
                mag_msg = 0.0
                for s in order:
                    res = self.update_slice(s, ws, sites=False)
                    self._record(res)
                    updates += 1
                    mag_msg = max(mag_msg, self._round_mag(res))
                if mag_msg < tol:
                    break
            mag_site = 0.0
            if self.has_sites:
                for s in range(S):
                    res = self.update_slice(s, ws, messages=False)
                    updates += 1
                    for t in self._owned(s):
                        self.state.mag_site[t] = res.mag_site
                    mag_site = max(mag_site, res.mag_site)
            mag = max(mag_msg, mag_site)
            history.append(mag)
            if mag_site < tol and mag_msg < tol:
                return True, r + 1, updates, history, [ws]
        return False, len(history), updates, history, [ws]

    def _run_dynamic(self, tol, max_iters, k):
        """Greedy: update the slices whose incoming messages changed most.

        Up to k slices at pairwise distance >= 2 are updated per step; such
        slices share no message, so they run concurrently without locks.
        """
        S = self.T - 1
        pri = np.full(S, np.inf)
        budget = max_iters * max(1, 2 * S - 1)
        works = [self._work() for _ in range(k)]
        history, updates = [], 0
        pool = ThreadPoolExecutor(max_workers=k) if k > 1 else None
        try:
            while updates < budget:
                order = np.argsort(-pri, kind="stable")
                chosen = []
                for s in order:
                    if not pri[s] >= tol:
                        break
                    if all(abs(int(s) - c) >= 2 for c in chosen):
                        chosen.append(int(s))
                        if len(chosen) == k:
                            break
                if not chosen:
                    return True, int(np.ceil(updates / max(1, 2 * S - 1))), updates, history, works
                history.append(float(pri[chosen[0]]))
                if pool is None:
                    results = [self.update_slice(chosen[0], works[0])]
                else:
                    results = list(pool.map(lambda a: self.update_slice(a[0], a[1]), zip(chosen, works)))
                updates += len(chosen)
                for res in sorted(results, key=lambda r: r.s):
                    s = res.s
                    self._record(res)
                    pri[s] = res.site_residual if res.ok else 0.0
                    if s + 1 <= S - 1:
                        pri[s + 1] = max(pri[s + 1], res.mag_alpha) if np.isfinite(pri[s + 1]) else pri[s + 1]
                    if s >= 1:
                        pri[s - 1] = max(pri[s - 1], res.mag_beta) if np.isfinite(pri[s - 1]) else pri[s - 1]
        finally:
            if pool is not None:
                pool.shutdown()
        return False, int(np.ceil(updates / max(1, 2 * S - 1))), updates, history, works

    def _run_filter(self):
        """Single forward pass without backward messages: alpha_t is the filtered density."""
        ws = self._work()
        self.state.beta_h[:] = 0.0
        self.state.beta_q[:] = 0.0
        mag = 0.0
        for s in range(self.T - 1):
            res = self.update_slice(s, ws, forward_only=True)
            self._record(res)
            mag = max(mag, res.mag_alpha, res.mag_site)
        return True, 1, self.T - 1, [mag], [ws]

    # extraction ------------------------------------------------------------------------

    def _stat_positions(self):
        if self._stat_pos is None:
            n = self.n
            P11 = structural_product_pattern(self.structure, SparseSym.identity_pattern(n))
            r11, c11 = P11.row_idx, P11.col_indices()
            S = self.structure.tocoo()
            rx, cx = S.row.astype(np.int64) + n, S.col.astype(np.int64)
            if self.plan.dense:
                N = 2 * n
                p11, px = r11 * N + c11, rx * N + cx
            else:
                p11, px = self.plan.sym.positions(r11, c11), self.plan.sym.positions(rx, cx)
                if np.any(p11 < 0) or np.any(px < 0):
                    raise MissingEntry("required second moment outside the factor pattern")
            self._stat_pos = (P11, p11, S.row.astype(np.int64), S.col.astype(np.int64), px)
        return self._stat_pos

    def extract(self, stats=False, evidence=False, consistency=True):
        """Pass over all slices without changing messages.

        Returns a dict with 'marginals' (SmoothedMarginals), optionally
        'consistency' (per-t canonical discrepancy, t = 1..T-2), 'stats'
        (SufficientStats) and 'log_evidence'.
        """
        T, n = self.T, self.n
        ws = self._work()
        g = self.G.nnz
        mean, var, cov = np.zeros((T, n)), np.zeros((T, n)), np.zeros((T, g))
        slice_mean = np.zeros((T - 1, 2 * n))
        proj_fwd, proj_bwd = {}, {}
        disc = np.zeros(T)
        out = {}
        if stats:
            P11, p11, sr, sc, px = self._stat_positions()
            xx = np.zeros(P11.nnz)
            cross = np.zeros(len(sr))
            sq = np.zeros(n)
        phi_slices = 0.0
        for s in range(T - 1):
            self._assemble(s, ws)
            scale = max(np.max(np.abs(ws.vals[self.plan.dst_d1])), np.max(np.abs(ws.vals[self.plan.dst_d2])), 1e-300)
            code, L = self.plan.factor(ws.vals, scale, out=ws.Lx)
            if code >= 0:
                raise NotPositiveDefinite(code)
            m, V1, V2, d1, d2, Z = self.plan.moments(L, ws.h)
            slice_mean[s] = m
            mean[s + 1], var[s + 1], cov[s + 1] = m[n:], d2, V2
            if s == 0:
                mean[0], var[0], cov[0] = m[:n], d1, V1
            if consistency:
                if s >= 1:
                    proj_bwd[s] = self._project(V1, m[:n], ws)
                if s + 1 <= T - 2:
                    proj_fwd[s + 1] = self._project(V2, m[n:], ws)
            if stats:
                m0, m1 = m[:n], m[n:]
                Zf = Z.ravel() if self.plan.dense else Z
                xx += Zf[p11] + m0[P11.row_idx] * m0[P11.col_indices()]
                cross += Zf[px] + m1[sr] * m0[sc]
                sq += d2 + m1 * m1
            if evidence:
                phi_slices += self._phi_factor(L, ws.h, m)
        if consistency:
            for t in range(1, T - 1):
                a, b = proj_fwd.get(t), proj_bwd.get(t)
                if a is None or b is None or a[0] is None or b[0] is None:
                    disc[t] = np.inf
                else:
                    disc[t] = max(np.max(np.abs(a[0] - b[0])), np.max(np.abs(a[1] - b[1])))
            out["consistency"] = disc[1:T - 1]
        out["marginals"] = SmoothedMarginals(mean, var, cov, self.G, slice_mean)
        if stats:
            out["stats"] = SufficientStats(P11.with_values(xx), sp.csr_matrix((cross, (sr, sc)), shape=(n, n)), sq,
                                           slice_mean[:, :n].copy(), slice_mean[:, n:].copy())
        if evidence:
            out["log_evidence"] = self._evidence(phi_slices, mean, var)
        return out

    def _phi_factor(self, L, h, m):
        if self.plan.dense:
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
        else:
            logdet = 2.0 * np.sum(np.log(L[self.plan.sym.Lp[:-1]]))
        return 0.5 * h @ m - 0.5 * logdet + 0.5 * len(h) * LOG2PI

    def _phi_messages(self, t):
        """Log partition of alpha_t * beta_t (canonical form on G)."""
        st = self.state
        h = st.alpha_h[t] + st.beta_h[t]
        q = st.alpha_q[t] + st.beta_q[t]
        if self.plan.dense:
            P = self.projector.to_dense(q)
            c = sla.cholesky(P, lower=True)
            m = sla.cho_solve((c, True), h)
            logdet = 2.0 * np.sum(np.log(np.diag(c)))
        else:
            if self._gfac is None:
                self._gfac = symbolic_cholesky(self.G, amd_order(self.G))
            sym = self._gfac
            Lx = np.empty(sym.nnz)
            code = factor_values(sym, q, PIVOT_RTOL * max(np.max(np.abs(q)), 1e-300), Lx)
            if code >= 0:
                raise NotPositiveDefinite(int(sym.perm.forward[code]))
            L = sym.with_values(Lx)
            m = cholesky_solve(L, h)
            logdet = 2.0 * np.sum(np.log(Lx[sym.Lp[:-1]]))
        return 0.5 * h @ m - 0.5 * logdet + 0.5 * self.n * LOG2PI

    def _evidence(self, phi_slices, mean, var):
        """Evidence-style objective of the current messages (exact for Gaussian models with full messages)."""
        T, n, st, obs = self.T, self.n, self.state, self.obs
        val = phi_slices - sum(self._phi_messages(t) for t in range(1, T - 1))
        # prior and transition normalisers, observation constants
        val -= _phi_sparse(self._prior_h, self.prior_Q)
        val += (T - 1) * (0.5 * self.log_det_Q - 0.5 * n * LOG2PI) - 0.5 * self.drift_quad
        val += float(np.sum(obs.const))
        if self.has_sites:
            for t in self._site_t:
                eta = obs.eta[t]
                qm = 1.0 / var[t]
                hm = mean[t] * qm
                ch, cq = hm - st.lam0_h[t], qm - st.lam0_q[t]
                logz, _, _, status = expcox_tilted_batch(ch, cq, eta, *self.rules, True)
                act = eta > 0
                if np.any(status[act] > 2):
                    raise RuntimeFailure("tilted normaliser failed during evidence evaluation")
                phi_m = 0.5 * hm ** 2 / qm - 0.5 * np.log(qm)
                phi_c = 0.5 * ch ** 2 / cq - 0.5 * np.log(cq)
                val += float(np.sum((logz - phi_m + phi_c)[act]))
        return float(val)

    # convenience -----------------------------------------------------------------------

    def marginals(self):
        return self.extract(consistency=False)["marginals"]

    def weak_consistency_report(self):
        return self.extract(consistency=True)["consistency"]

    def extract_sufficient_stats(self):
        return self.extract(stats=True, consistency=False)["stats"]

    def log_evidence(self):
        return self.extract(evidence=True, consistency=False)["log_evidence"]

    def two_slice_dense(self, s):
        """Dense (h, Q) of slice s, for tests and diagnostics."""
        ws = self._work()
        self._assemble(s, ws)
        return ws.h.copy(), self.plan.dense_precision(ws.vals)

    def residuals(self, X):
        """Whitened residuals L^T (x - m) of the true path under every two-slice marginal."""
        ws = self._work()
        out = []
        for s in range(self.T - 1):
            self._assemble(s, ws)
            scale = max(np.max(np.abs(ws.vals[self.plan.dst_d1])), np.max(np.abs(ws.vals[self.plan.dst_d2])), 1e-300)
            code, L = self.plan.factor(ws.vals, scale, out=ws.Lx)
            if code >= 0:
                raise NotPositiveDefinite(code)
            m = self.plan.moments(L, ws.h)[0]
            out.append(self.plan.whiten(L, np.concatenate([X[s], X[s + 1]]), m))
        return np.concatenate(out)


def _logdet_sparse(S: SparseSym):
    sym = symbolic_cholesky(S, amd_order(S))
    Lx = np.empty(sym.nnz)
    code = factor_values(sym, S.values, PIVOT_RTOL * max(np.max(np.abs(S.diagonal())), 1e-300), Lx)
    if code >= 0:
        raise NotPositiveDefinite(int(sym.perm.forward[code]))
    return 2.0 * float(np.sum(np.log(Lx[sym.Lp[:-1]])))


def _phi_sparse(h, S: SparseSym):
    sym = symbolic_cholesky(S, amd_order(S))
    Lx = np.empty(sym.nnz)
    code = factor_values(sym, S.values, PIVOT_RTOL * max(np.max(np.abs(S.diagonal())), 1e-300), Lx)
    if code >= 0:
        raise NotPositiveDefinite(int(sym.perm.forward[code]))
    m = cholesky_solve(sym.with_values(Lx), h)
    return 0.5 * h @ m - float(np.sum(np.log(Lx[sym.Lp[:-1]]))) + 0.5 * S.n * LOG2PI


def engine_for(spec, obs: Observations, config: Optional[EngineConfig] = None, tm: Optional[TransitionMoments] = None,
               prior=None, structure=None):
    """Engine for a ModelSpec with its true transition (or the given expectations)."""
    from .models import inference_prior, stationary_moments

    if tm is None:
        tm = TransitionMoments.deterministic(spec.A, spec.Q)
    if prior is None:
        _, V = stationary_moments(tm.EA, tm.EQ)
        prior = inference_prior(V)
    if structure is None:
        structure = spec.A
    return Engine(structure, spec.Q, obs, tm, prior, config)


# checkpoint ---------------------------------------------------------------------------

MAGIC = b"ECMPCKPT"
VERSION = 1
_KINDS = dict(alpha_h=0, alpha_q=1, beta_h=2, beta_q=3, lam0_h=4, lam0_q=5, laml_h=6, laml_q=7)
_INDEX = np.dtype([("t", "<i8"), ("kind", "<i4"), ("j", "<i4"), ("offset", "<u8"), ("length", "<u8")])
_HEADER = struct.Struct("<8sIIqqq")


def save_checkpoint(state: MessageState, path):
    """Versioned binary container: header, index (t, kind, j, offset, length), float64 payload.

    Each record holds one message vector; j = -1 marks a vector over all
    coordinates.  Records with t = -1 store the message structure.
    """
    T, n, g = state.T, state.n, state.G.nnz
    blobs, index = [], []
    offset = 0

    def put(t, kind, arr):
        nonlocal offset
        b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append((t, kind, -1, offset, len(b)))
        blobs.append(b)
        offset += len(b)

    for name, kind in _KINDS.items():
        arr = getattr(state, name)
        for t in range(T):
            put(t, kind, arr[t])
    put(-1, 100, state.G.col_ptr.astype(float))
    put(-1, 101, state.G.row_idx.astype(float))
    fam = state.family.encode()
    idx = np.array(index, dtype=_INDEX)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(index), T, n, g))
        f.write(struct.pack("<I", len(fam)))
        f.write(fam)
        f.write(idx.tobytes())
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> MessageState:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, count, T, n, g = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValidationError("not a message checkpoint")
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    (lf,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    family = raw[pos:pos + lf].decode()
    pos += lf
    idx = np.frombuffer(raw, dtype=_INDEX, count=count, offset=pos)
    base = pos + count * _INDEX.itemsize
    recs = {}
    for t, kind, j, off, length in idx:
        recs[(int(t), int(kind))] = np.frombuffer(raw, dtype="<f8", count=int(length) // 8, offset=base + int(off))
    col_ptr = recs[(-1, 100)].astype(np.int64)
    row_idx = recs[(-1, 101)].astype(np.int64)
    G = SparseSym(int(n), col_ptr, row_idx)
    st = MessageState.zeros(int(T), int(n), G, family)
    for name, kind in _KINDS.items():
        arr = getattr(st, name)
        for t in range(T):
            arr[t] = recs[(t, kind)]
    return st
