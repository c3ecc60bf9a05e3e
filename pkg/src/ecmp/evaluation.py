"""Accuracy metrics.

Symmetric KL between two-slice marginals, Q-Q deviation of whitened
residuals, ROC curves for structure recovery and EP one-step-ahead
predictive probabilities.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.stats import norm

from .engine import Engine, EngineConfig
from .errors import NotPositiveDefinite, RuntimeFailure, ValidationError
from .gaussian import TransitionMoments, symmetric_kl
from .models import Observations
from .sites import _rules, expcox_tilted_batch
from .sparse import SparseSym


@dataclass
class AccuracyReport:
    score: float
    metric: str  # "kl" or "qq"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.score >= 0:
            raise ValidationError("accuracy scores are non-negative")

    def to_dict(self):
        return dict(score=self.score, metric=self.metric, **self.config)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


# KL score --------------------------------------------------------------------------

def two_slice_moments(engine: Engine):
    """Dense (mean, covariance) of every two-slice marginal of a run."""
    out = []
    for s in range(engine.T - 1):
        h, P = engine.two_slice_dense(s)
        try:
            c = sla.cho_factor(P, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(-1) from exc
        V = sla.cho_solve(c, np.eye(len(h)))
        out.append((sla.cho_solve(c, h), 0.5 * (V + V.T)))
    return out


def kl_accuracy(exact: Sequence, approx: Sequence) -> float:
    """(1 / (2(T-1))) sum_t [KL(q||p) + KL(p||q)] over two-slice Gaussians."""
    if len(exact) != len(approx) or not len(exact):
        raise ValidationError("runs must have the same, non-zero number of slices")
    total = 0.0
    for (mp, Vp), (mq, Vq) in zip(exact, approx):
        total += symmetric_kl(mp, Vp, mq, Vq)  # already half the two-way sum
    return float(total / len(exact))


# Q-Q deviation ---------------------------------------------------------------------

def qq_levels(bins=50):
    return (np.arange(bins) + 0.5) / bins


def qq_deviation(residuals, bins=50) -> float:
    """Mean absolute difference between empirical and standard normal quantiles."""
    r = np.asarray(residuals, float).ravel()
    if r.size == 0:
        raise ValidationError("no residuals")
    p = qq_levels(bins)
    return float(np.mean(np.abs(np.quantile(r, p) - norm.ppf(p))))


def qq_table(residuals, bins=50):
    p = qq_levels(bins)
    return np.column_stack([p, norm.ppf(p), np.quantile(np.asarray(residuals).ravel(), p)])


# ROC ----------------------------------------------------------------------------------

def structure_roc(scores, truth) -> RocCurve:
    """Threshold sweep over scores (higher means edge present); trapezoidal AUC."""
    s = np.asarray(scores, float).ravel()
    y = np.asarray(truth, bool).ravel()
    if s.shape != y.shape:
        raise ValidationError("scores and truth differ in length")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ValidationError("ROC needs both positive and negative edges")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # one point per distinct threshold
    tpr = np.r_[0.0, tp[last] / P]
    fpr = np.r_[0.0, fp[last] / N]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * 0.5 * (tpr[1:] + tpr[:-1])))
    return RocCurve(thr, fpr, tpr, auc)


def candidate_edge_scores(inclusion, candidate, A_true, exclude_diagonal=True):
    """Scores and labels over the candidate edges; true edges are the stored entries of A_true.

    The diagonal is excluded by default since every self-edge is present
    in the generating model.
    """
    C = sp.coo_matrix(candidate)
    keep = (C.row != C.col) if exclude_diagonal else np.ones(C.nnz, bool)
    r, c = C.row[keep], C.col[keep]
    order = np.lexsort((c, r))
    r, c = r[order], c[order]
    P = sp.csr_matrix(inclusion)
    At = sp.csr_matrix(A_true)
    truth = np.asarray((abs(At) > 0)[r, c]).ravel()
    scores = np.asarray(P[r, c]).ravel()
    return scores, truth


# one-step predictive ---------------------------------------------------------------------

def _posterior(m, V, D, b):
    """Moments of N(m, V) times exp(b^T x - x^T diag(D) x / 2) and the log normaliser ratio."""
    n = len(m)
    if np.all(D >= 0):
        sD = np.sqrt(D)
        B = np.eye(n) + sD[:, None] * V * sD[None, :]
        L = np.linalg.cholesky(B)
        W = sla.solve_triangular(L, sD[:, None] * V, lower=True)
        S = V - W.T @ W
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
    else:
        P = np.linalg.inv(V) + np.diag(D)
        S = np.linalg.inv(P)
        sign, logdet = np.linalg.slogdet(np.eye(n) + V * D[None, :])
        if sign <= 0:
            raise NotPositiveDefinite(-1)
    S = 0.5 * (S + S.T)
    r = b - D * m
    mu = m + S @ r
    quad = 0.5 * (m @ (r - D * (S @ r)) + b @ mu)
    return mu, S, quad - 0.5 * logdet


def predictive_evidence(m, V, lin, prec, eta, const, gh_nodes=32, tol=1e-10, max_sweeps=200) -> float:
    """EP approximation of log of the integral of N(x; m, V) times the observation likelihood.

    The exact Gaussian part (lin, prec) is absorbed in closed form; every
    exp(-eta e^x) factor gets a univariate EP site updated sequentially with
    rank-one covariance updates.
    """
    m = np.asarray(m, float)
    V = np.asarray(V, float)
    n = len(m)
    D0 = np.asarray(prec, float).copy()
    b0 = np.asarray(lin, float).copy()
    mu, S, val = _posterior(m, V, D0, b0)
    act = np.flatnonzero(np.asarray(eta) > 0)
    if act.size == 0:
        return float(val + const)
    rules = _rules(gh_nodes)
    tau = np.zeros(n)
    nu = np.zeros(n)
    for sweep in range(max_sweeps):
        delta = 0.0
        for j in act:
            sjj = S[j, j]
            cq = 1.0 / sjj - tau[j]
            ch = mu[j] / sjj - nu[j]
            _, tm, tv, st = expcox_tilted_batch(np.array([ch]), np.array([cq]), np.array([eta[j]]), *rules, True)
            if st[0] > 2:
                raise RuntimeFailure("tilted moments failed in the predictive EP pass")
            new_tau = 1.0 / tv[0] - cq
            new_nu = tm[0] / tv[0] - ch
            dt, dn = new_tau - tau[j], new_nu - nu[j]
            delta = max(delta, abs(dt), abs(dn))
            s = S[:, j].copy()
            den = 1.0 + dt * sjj
            S -= (dt / den) * np.outer(s, s)
            mu += ((dn - dt * mu[j]) / den) * s
            tau[j], nu[j] = new_tau, new_nu
        if delta < tol:
            break
    mu, S, val = _posterior(m, V, D0 + tau, b0 + nu)
    # site normalisers relative to the normalised cavities
    sd = np.diag(S)[act]
    cq = 1.0 / sd - tau[act]
    ch = mu[act] / sd - nu[act]
    logz, _, _, st = expcox_tilted_batch(ch, cq, np.asarray(eta, float)[act], *rules, True)
    if np.any(st > 2):
        raise RuntimeFailure("tilted normaliser failed in the predictive EP pass")
    qm, hm = 1.0 / sd, mu[act] / sd
    phi_m = 0.5 * hm ** 2 / qm - 0.5 * np.log(qm)
    phi_c = 0.5 * ch ** 2 / cq - 0.5 * np.log(cq)
    return float(val + const + np.sum(logz - phi_m + phi_c))


def one_step_predictive(alpha_h, alpha_Q, A, Q, obs: Observations, t, gh_nodes=32) -> float:
    """log p(y_t | y_{<t}) with the filtered message (alpha_h, alpha_Q) of x_{t-1} pushed through (A, Q)."""
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, float)
    Qd = Q.to_dense() if isinstance(Q, SparseSym) else np.asarray(Q, float)
    c = sla.cho_factor(alpha_Q, lower=True)
    Va = sla.cho_solve(c, np.eye(len(alpha_h)))
    ma = sla.cho_solve(c, alpha_h)
    Vp = Ad @ Va @ Ad.T + np.linalg.inv(Qd)
    Vp = 0.5 * (Vp + Vp.T)
    return predictive_evidence(Ad @ ma, Vp, obs.lin[t], obs.prec[t], obs.eta[t], obs.const[t], gh_nodes)


def predictive_log_series(A, Q, obs: Observations, prior, family="full", gh_nodes=32, tol=1e-10, G=None):
    """log p(y_t | y_{<t}) for t = 1..T-1 from a single filtering pass under fixed (A, Q)."""
    Qs = Q if isinstance(Q, SparseSym) else SparseSym.from_dense(np.asarray(Q, float))
    A = sp.csr_matrix(A)
    tm = TransitionMoments.deterministic(A, Qs)
    cfg = EngineConfig(family=family, schedule="filter", gh_nodes=gh_nodes, tol=tol)
    eng = Engine(A, Qs, obs, tm, prior, cfg, G=G)
    eng.run()
    Gp = eng.G
    out = np.zeros(obs.T - 1)
    for t in range(1, obs.T):
        if t == 1:
            h, P = _filtered_first(eng)
        else:
            st = eng.state
            P = Gp.with_values(st.alpha_q[t - 1]).to_dense()
            h = st.alpha_h[t - 1]
        out[t - 1] = one_step_predictive(h, P, A, Qs, obs, t, gh_nodes)
    return out


def _filtered_first(eng: Engine):
    """Canonical filtered marginal of x_0 (prior, exact Gaussian part and site messages at t = 0)."""
    obs, st = eng.obs, eng.state
    P = eng.prior_Q.to_dense() + np.diag(obs.prec[0] + st.lam0_q[0])
    h = eng._prior_h + obs.lin[0] + st.lam0_h[0]
    return h, P


def cumulative_log_ratio(series_a, series_b):
    return np.cumsum(np.asarray(series_a) - np.asarray(series_b))


def reports_to_csv(rows: list):
    """Rows of dicts to CSV text with a sorted header."""
    if not rows:
        return ""
    keys = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def roc_to_json(curve: RocCurve):
    return json.dumps(dict(auc=curve.auc, thresholds=[float(x) if np.isfinite(x) else None for x in curve.thresholds],
                           fpr=curve.fpr.tolist(), tpr=curve.tpr.tolist()), sort_keys=True)
