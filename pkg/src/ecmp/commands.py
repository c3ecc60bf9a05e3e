"""Implementations of the command line subcommands.

Result files are deterministic given (config, seed); wall-clock timings go
to separate ``timings.json`` / ``bench.csv`` files.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ExperimentConfig, load
from .engine import engine_for, save_checkpoint
from .errors import ValidationError
from .evaluation import candidate_edge_scores, structure_roc
from .io import (ensure_dir, read_observations, read_sparse_csv, write_csv, write_json, write_matrix_csv,
                 write_observations, write_sparse_csv)
from .models import simulate

log = logging.getLogger(__name__)
_SINGLE_CORE = False


def single_core():
    global _SINGLE_CORE
    _SINGLE_CORE = True
    try:
        import numba
        numba.set_num_threads(1)
    except (ImportError, ValueError):
        pass


def _config(args) -> ExperimentConfig:
    cfg = load(args.config)
    if _SINGLE_CORE:
        cfg.inference = replace(cfg.inference, k=1)
    return cfg


def _manifest(cfg, args, **extra):
    return dict(command=args.command, seed=args.seed, config_sha256=cfg.digest(), **extra)


def _observations(cfg, spec, args):
    if args.data:
        return read_observations(args.data, spec, cfg.model.T), None
    sim = simulate(spec, cfg.model.T, args.seed)
    return sim.obs, sim


def _write_marginals(out, marg):
    T, n = marg.mean.shape
    write_csv(out / "marginals.csv", ["t", "j", "mean", "var"],
              ((t, j, marg.mean[t, j], marg.var[t, j]) for t in range(T) for j in range(n)))


def cmd_simulate(args):
    cfg = _config(args)
    spec = ex.build_spec(cfg.model)
    sim = simulate(spec, cfg.model.T, args.seed)
    out = ensure_dir(args.out)
    write_matrix_csv(out / "X.csv", sim.X)
    write_observations(out, sim.obs)
    write_sparse_csv(out / "A_true.csv", spec.A)
    if spec.mesh is not None:
        write_csv(out / "mesh_vertices.csv", ["x", "y"], spec.mesh.vertices.tolist())
        write_csv(out / "mesh_triangles.csv", ["a", "b", "c"], spec.mesh.triangles.tolist())
    counts = dict(T=cfg.model.T, n=int(spec.A.shape[0]), observation=spec.observation)
    if sim.obs.events is not None:
        counts["events"] = int(sum(len(e) for e in sim.obs.events))
    elif spec.observation == "poisson":
        counts["counts"] = int(sim.obs.y.sum())
    else:
        counts["observed"] = int(sim.obs.mask.sum())
    (out / "config.yaml").write_text(cfg.dump())
    write_json(out / "manifest.json", _manifest(cfg, args, **counts))


def cmd_infer(args):
    cfg = _config(args)
    spec = ex.build_spec(cfg.model)
    obs, _ = _observations(cfg, spec, args)
    eng = engine_for(spec, obs, cfg.inference.engine())
    rep = eng.run()
    res = eng.extract(consistency=True, evidence=True)
    out = ensure_dir(args.out)
    _write_marginals(out, res["marginals"])
    cons = res["consistency"]
    write_csv(out / "consistency.csv", ["t", "residual"], ((t + 1, float(c)) for t, c in enumerate(cons)))
    report = rep.to_dict()
    timings = report.pop("timings")
    report.update(log_evidence=res["log_evidence"], max_consistency=float(np.max(cons)) if cons.size else 0.0,
                  family=cfg.inference.family)
    write_json(out / "convergence.json", report)
    write_json(out / "timings.json", timings)
    save_checkpoint(eng.state, out / "checkpoint.bin")
    write_json(out / "manifest.json", _manifest(cfg, args, partial=not rep.converged))
    if not rep.converged:
        log.warning("message passing did not converge; results are flagged as partial")


def _learn_outputs(out, res, S):
    write_csv(out / "edges.csv", ["i", "j", "p_inclusion", "mean_a"], res.edge_table())
    rows = [{k: v for k, v in d.items() if k != "seconds"} for d in res.diagnostics]
    keys = sorted({k for r in rows for k in r})
    write_csv(out / "diagnostics.csv", keys, ([r.get(k, "") for k in keys] for r in rows))
    write_json(out / "timings.json", [d.get("seconds") for d in res.diagnostics])
    post = dict(EQ_diag=res.EQ_diag, converged=res.converged,
                gamma=None if res.gamma is None else dict(shape=res.gamma.shape, rate=res.gamma.rate),
                B=None if res.b is None else res.b.mean, n_candidate_edges=int(S.nnz))
    write_json(out / "posterior.json", post)
    _write_marginals(out, res.marginals)


def cmd_learn(args):
    cfg = _config(args)
    spec = ex.build_spec(cfg.model)
    obs, _ = _observations(cfg, spec, args)
    res, S = ex.learn(spec, obs, cfg)
    out = ensure_dir(args.out)
    _learn_outputs(out, res, S)
    write_json(out / "manifest.json", _manifest(cfg, args, vb_cycles=len(res.diagnostics)))


def _evaluate_artifacts(cfg, args, out):
    art = Path(args.artifacts)
    if not art.is_dir() or not any(art.iterdir()):
        raise ValidationError(f"artifact directory {art} is missing or empty")
    edges = art / "edges.csv"
    truth = Path(args.data or art) / "A_true.csv"
    if not edges.exists() or not truth.exists():
        raise ValidationError("ROC evaluation needs edges.csv (learn output) and A_true.csv (simulate output)")
    spec = ex.build_spec(cfg.model)
    n = spec.A.shape[0]
    from .io import read_csv
    import scipy.sparse as sp
    _, rows = read_csv(edges)
    i = np.array([int(r[0]) for r in rows])
    j = np.array([int(r[1]) for r in rows])
    p = np.array([float(r[2]) for r in rows])
    P = sp.csr_matrix((p, (i, j)), shape=(n, n))
    C = sp.csr_matrix((np.ones_like(p), (i, j)), shape=(n, n))
    scores, lab = candidate_edge_scores(P, C, read_sparse_csv(truth, n))
    roc = structure_roc(scores, lab)
    (out / "roc.csv").write_text(roc.to_csv())
    write_json(out / "auc.json", dict(auc=roc.auc, positives=int(lab.sum()), negatives=int((~lab).sum())))


def _summary_table(rows, keys):
    means = ex.mean_by(rows, keys)
    return [dict(zip(keys, k), mean_score=v) for k, v in means.items()]


def cmd_evaluate(args):
    cfg = _config(args)
    out = ensure_dir(args.out)
    if args.artifacts:
        _evaluate_artifacts(cfg, args, out)
        write_json(out / "manifest.json", _manifest(cfg, args, mode="artifacts"))
        return
    cfg.evaluation = replace(cfg.evaluation, seeds=[args.seed + int(s) for s in cfg.evaluation.seeds])
    metric = cfg.evaluation.metric
    if metric in ("kl", "qq"):
        rows = ex.kl_grid(cfg, args.threads) if metric == "kl" else ex.qq_grid(cfg, args.threads)
        keys = ["n_neighb", "s", "seed", "family", "n_msg", "score", "converged", "rounds", "consistency", "tol"]
        write_csv(out / f"{metric}_scores.csv", keys, ([r[k] for k in keys] for r in rows))
        summary = _summary_table(rows, ["n_neighb", "s", "family", "n_msg"])
        write_csv(out / f"{metric}_summary.csv", list(summary[0]), ([r[k] for k in summary[0]] for r in summary))
    elif metric == "roc":
        rows, curves = ex.roc_experiment(cfg, args.threads)
        keys = ["w", "T", "seed", "auc", "vb_cycles", "vb_converged"]
        write_csv(out / "auc.csv", keys, ([r[k] for k in keys] for r in rows))
        for r, c in zip(rows, curves):
            (out / f"roc_T{r['T']}_seed{r['seed']}.csv").write_text(c.to_csv())
        write_json(out / "summary.json", dict(mean_auc={str(k[0]): v for k, v in
                                                        ex.mean_by(rows, ["T"], "auc").items()}))
    else:
        rows = ex.predictive_experiment(cfg, args.threads)
        keys = ["seed", "t", "logp_connected", "logp_independent", "cumulative_log_ratio"]
        write_csv(out / "predictive.csv", keys, ([r[k] for k in keys] for r in rows))
        final = {}
        for r in rows:
            final[str(r["seed"])] = r["cumulative_log_ratio"]
        write_json(out / "summary.json", dict(total_log_ratio=final))
    write_json(out / "manifest.json", _manifest(cfg, args, metric=metric))


def cmd_bench(args):
    cfg = _config(args)
    rows = ex.bench(cfg, args.seed, args.threads)
    out = ensure_dir(args.out)
    keys = ["n", "family", "repeat", "T", "rounds", "slice_updates", "converged", "setup", "temporal", "linalg",
            "sites", "overhead", "total", "per_update"]
    write_csv(out / "bench.csv", keys, ([r[k] for k in keys] for r in rows))
    summary = {}
    for fam in cfg.bench.families:
        sel = [r for r in rows if r["family"] == fam]
        ns = sorted({r["n"] for r in sel})
        if len(ns) >= 2:
            times = [np.mean([r["total"] for r in sel if r["n"] == n]) for n in ns]
            summary[fam] = dict(exponent=ex.fitted_exponent(ns, times))
    write_json(out / "bench_summary.json", summary)
    write_json(out / "manifest.json", _manifest(cfg, args, single_core=_SINGLE_CORE))
