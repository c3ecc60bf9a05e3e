"""Experiment protocols shared by the command line and the acceptance suite.

Every protocol is a deterministic function of its configuration and seeds;
timing columns are the only non-reproducible outputs and are kept apart.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import scipy.sparse as sp

from .config import ExperimentConfig, InferenceConfig, LearningConfig, ModelConfig
from .engine import engine_for
from .evaluation import (candidate_edge_scores, kl_accuracy, predictive_log_series, qq_deviation, structure_roc,
                         two_slice_moments)
from .mesh import make_disc_mesh, make_disc_mesh_n
from .models import ModelSpec, build_1d_spec, build_2d_rotation, simulate
from .params import LearnConfig, PriorSpec, vb_outer_loop

log = logging.getLogger(__name__)


def build_spec(m: ModelConfig) -> ModelSpec:
    if m.builder == "oned":
        return build_1d_spec(m.n, m.n_neighb, m.eps_a, m.v_sys, m.s, m.observation, m.v_obs, m.p_obs)
    mesh = make_disc_mesh_n(m.radius, m.n) if m.n is not None else make_disc_mesh(m.radius, m.mesh_h)
    return build_2d_rotation(mesh, m.w, m.eps_w, m.sigma2, m.observation, m.dt)


def candidate_structure(spec: ModelSpec, which: str):
    n = spec.A.shape[0]
    if which == "model":
        S = spec.prior_structure if spec.prior_structure is not None else spec.A
    elif which == "diagonal":
        S = sp.identity(n, format="csr")
    else:
        k = int(which.split(":")[1])
        i = np.arange(n)
        S = sp.csr_matrix(np.abs(np.subtract.outer(i, i)) <= k, dtype=float)
    S = (sp.csr_matrix(S, dtype=float) != 0) + sp.identity(n, format="csr", dtype=bool)  # self-edges always
    S = sp.csr_matrix(S, dtype=float)
    S.sort_indices()
    return S


def prior_spec(lc: LearningConfig) -> PriorSpec:
    return PriorSpec(v_slab=lc.v_slab, p_slab=lc.p_slab, k=lc.k, tau=lc.tau, v_b=lc.v_b, V1=lc.v1)


def learn_config(lc: LearningConfig) -> LearnConfig:
    return LearnConfig(max_outer=lc.max_outer, outer_tol=lc.outer_tol, learn_Q=lc.learn_Q, Q_fixed=lc.Q_fixed,
                       row_damping=lc.row_damping, order=tuple(lc.order))


def learn(spec: ModelSpec, obs, cfg: ExperimentConfig, candidate=None):
    S = candidate_structure(spec, candidate or cfg.learning.candidate)
    return vb_outer_loop(S, obs, prior_spec(cfg.learning), cfg.inference.engine(), learn_config(cfg.learning)), S


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))  # results keep the input order


# 1D testbed grids --------------------------------------------------------------------------

def _grid_cells(cfg: ExperimentConfig):
    ev = cfg.evaluation
    return [(nb, float(s), int(seed)) for nb in ev.n_neighb for s in ev.s for seed in ev.seeds]


def _run_family(spec, obs, inf: InferenceConfig, family):
    eng = engine_for(spec, obs, replace(inf, family=family).engine())
    rep = eng.run()
    cons = eng.weak_consistency_report()
    return eng, rep, float(np.max(cons)) if cons.size else 0.0


def kl_grid(cfg: ExperimentConfig, threads=1):
    """KL score of each family against the full-family reference on the Gaussian 1D testbed."""
    m = replace(cfg.model, builder="oned", observation="gaussian")

    def cell(c):
        nb, s, seed = c
        spec = build_spec(replace(m, n_neighb=nb, s=s))
        sim = simulate(spec, m.T, seed)
        ref, _, _ = _run_family(spec, sim.obs, cfg.inference, cfg.evaluation.reference_family)
        exact = two_slice_moments(ref)
        rows = []
        for fam in cfg.evaluation.families:
            eng, rep, cons = _run_family(spec, sim.obs, cfg.inference, fam)
            rows.append(dict(n_neighb=nb, s=s, seed=seed, family=fam, n_msg=family_bandwidth(fam),
                             score=kl_accuracy(exact, two_slice_moments(eng)), converged=bool(rep.converged),
                             rounds=rep.rounds, consistency=cons, tol=cfg.inference.tol))
        return rows

    return [r for rows in _pool_map(cell, _grid_cells(cfg), threads) for r in rows]


def qq_grid(cfg: ExperimentConfig, threads=1):
    """Q-Q deviation of whitened residuals of the true path on the Poisson 1D testbed."""
    m = replace(cfg.model, builder="oned", observation="poisson")

    def cell(c):
        nb, s, seed = c
        spec = build_spec(replace(m, n_neighb=nb, s=s))
        sim = simulate(spec, m.T, seed)
        rows = []
        for fam in cfg.evaluation.families:
            eng, rep, cons = _run_family(spec, sim.obs, cfg.inference, fam)
            rows.append(dict(n_neighb=nb, s=s, seed=seed, family=fam, n_msg=family_bandwidth(fam),
                             score=qq_deviation(eng.residuals(sim.X), cfg.evaluation.bins),
                             converged=bool(rep.converged), rounds=rep.rounds, consistency=cons,
                             tol=cfg.inference.tol))
        return rows

    return [r for rows in _pool_map(cell, _grid_cells(cfg), threads) for r in rows]


def family_bandwidth(family: str):
    if family == "diag":
        return 0
    if family.startswith("band:"):
        return int(family[5:])
    return -1


def mean_by(rows, keys, value="score"):
    """Average ``value`` over rows grouped by ``keys``; groups in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


# structure recovery and predictive comparison -----------------------------------------------

def roc_experiment(cfg: ExperimentConfig, threads=1):
    """AUC of p(z_ij = 1) against the generating structure, per (T, seed)."""
    cells = [(int(T), int(seed)) for T in cfg.evaluation.T_grid for seed in cfg.evaluation.seeds]

    def cell(c):
        T, seed = c
        spec = build_spec(cfg.model)
        sim = simulate(spec, T, seed)
        res, S = learn(spec, sim.obs, cfg)
        scores, truth = candidate_edge_scores(res.inclusion_matrix(), S, spec.A)
        roc = structure_roc(scores, truth)
        return dict(w=cfg.model.w, T=T, seed=seed, auc=roc.auc, vb_cycles=len(res.diagnostics),
                    vb_converged=bool(res.converged)), roc

    out = _pool_map(cell, cells, threads)
    return [r for r, _ in out], [c for _, c in out]


def predictive_experiment(cfg: ExperimentConfig, threads=1):
    """One-step-ahead log predictive of connected versus independent learned models."""

    def cell(seed):
        spec = build_spec(cfg.model)
        sim = simulate(spec, cfg.model.T, int(seed))
        conn, _ = learn(spec, sim.obs, cfg, "model")
        ind, _ = learn(spec, sim.obs, cfg, "diagonal")
        prior = prior_spec(cfg.learning).initial_state(spec.A.shape[0])
        fam = cfg.inference.family
        out = {}
        for name, res in (("connected", conn), ("independent", ind)):
            EQ = sp.diags(res.EQ_diag)
            out[name] = predictive_log_series(res.EA, EQ.toarray(), sim.obs, prior, family=fam,
                                              gh_nodes=cfg.inference.gh_nodes)
        cum = np.cumsum(out["connected"] - out["independent"])
        return [dict(seed=int(seed), t=t + 1, logp_connected=float(out["connected"][t]),
                     logp_independent=float(out["independent"][t]), cumulative_log_ratio=float(cum[t]))
                for t in range(len(cum))]

    return [r for rows in _pool_map(cell, list(cfg.evaluation.seeds), threads) for r in rows]


# benchmark -----------------------------------------------------------------------------------

def bench(cfg: ExperimentConfig, seed: int, threads=1):
    """Wall time per phase for every (n, family) on the rotation model."""
    rows = []
    for n in cfg.bench.n_list:
        spec = build_spec(replace(cfg.model, builder="rotation", n=int(n)))
        sim = simulate(spec, cfg.bench.T, seed)
        for fam in cfg.bench.families:
            for rep_i in range(cfg.bench.repeats):
                t0 = time.perf_counter()
                eng = engine_for(spec, sim.obs, replace(cfg.inference, family=fam).engine())
                setup = time.perf_counter() - t0
                rep = eng.run(max_iters=cfg.bench.max_rounds.get(fam))
                tm = rep.timings
                total = tm["total"] + setup
                if total > cfg.bench.timeout:
                    log.warning("bench n=%d family=%s exceeded the timeout (%.1f s)", n, fam, total)
                rows.append(dict(n=int(n), family=fam, repeat=rep_i, T=cfg.bench.T, rounds=rep.rounds,
                                 slice_updates=rep.slice_updates, converged=bool(rep.converged), setup=setup,
                                 temporal=tm["temporal"], linalg=tm["linalg"], sites=tm["sites"],
                                 overhead=tm["overhead"] + setup, total=total,
                                 per_update=tm["total"] / max(rep.slice_updates, 1)))
                log.info("bench n=%d %s: %.2f s, %d rounds", n, fam, total, rep.rounds)
    return rows


def fitted_exponent(ns, times):
    """Least-squares slope of log time against log n."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)[0])
