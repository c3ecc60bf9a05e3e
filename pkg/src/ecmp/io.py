"""Deterministic CSV/JSON artifact files.

Floats are written with ``repr`` (shortest round-trip form), so output is
lossless and byte-identical across reruns on one platform.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .models import ModelSpec, Observations, gaussian_observations, lgcp_observations, poisson_observations


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_matrix_csv(path, M):
    M = np.asarray(M)
    write_csv(path, [f"c{j}" for j in range(M.shape[1])], M.tolist())


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def read_matrix_csv(path):
    _, rows = read_csv(path)
    return np.array([[float(x) for x in r] for r in rows])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o)}")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_sparse_csv(path, A):
    A = sp.coo_matrix(A)
    order = np.lexsort((A.col, A.row))
    write_csv(path, ["i", "j", "value"], zip(A.row[order], A.col[order], A.data[order].astype(float)))


def read_sparse_csv(path, n):
    _, rows = read_csv(path)
    if not rows:
        return sp.csr_matrix((n, n))
    i = np.array([int(r[0]) for r in rows])
    j = np.array([int(r[1]) for r in rows])
    v = np.array([float(r[2]) for r in rows])
    return sp.csr_matrix((v, (i, j)), shape=(n, n))


# observations ----------------------------------------------------------------------

def write_observations(out, obs: Observations):
    out = Path(out)
    if obs.kind == "gaussian":
        y = np.where(obs.mask, obs.y, np.nan)
        write_matrix_csv(out / "y.csv", y)
    elif obs.kind == "poisson":
        write_matrix_csv(out / "counts.csv", obs.y.astype(int))
    else:
        rows = [(t, e[0], e[1]) for t, ev in enumerate(obs.events) for e in ev]
        write_csv(out / "events.csv", ["t", "x", "y"], rows)


def read_observations(data_dir, spec: ModelSpec, T: int) -> Observations:
    d = Path(data_dir)
    if not d.is_dir():
        raise ValidationError(f"data directory {d} does not exist")
    try:
        if spec.observation == "gaussian":
            y = read_matrix_csv(d / "y.csv")
            mask = np.isfinite(y)
            obs = gaussian_observations(np.where(mask, y, 0.0), mask, spec.v_obs)
        elif spec.observation == "poisson":
            obs = poisson_observations(read_matrix_csv(d / "counts.csv"))
        else:
            _, rows = read_csv(d / "events.csv")
            ev = [[] for _ in range(T)]
            for r in rows:
                t = int(r[0])
                if not 0 <= t < T:
                    raise ValidationError("event time outside the configured horizon")
                ev[t].append((float(r[1]), float(r[2])))
            obs = lgcp_observations(spec.mesh, spec.dt, [np.array(e).reshape(-1, 2) for e in ev])
    except FileNotFoundError as exc:
        raise ValidationError(f"missing data file: {exc.filename}") from exc
    if obs.n != spec.A.shape[0]:
        raise ValidationError("data dimension does not match the model")
    return obs


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
