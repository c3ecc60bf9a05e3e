"""Model construction and simulation.

Transition models: banded 1D diffusion with correlated noise and a 2D
rotation on a disc mesh.  Observations: partially observed Gaussian,
Poisson counts per node, and log-Gaussian Cox events on a mesh.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import NotStable, ValidationError
from .mesh import Mesh, event_weights
from .sparse import SparseSym

log = logging.getLogger(__name__)


def rng_stream(seed: int, purpose: str, t: int = 0) -> np.random.Generator:
    """Counter-based generator for the sub-stream (purpose, t) of a run seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(purpose.encode()), int(t)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ModelSpec:
    """Linear-Gaussian dynamics with an observation model.

    ``A`` is a CSR matrix whose stored entries (explicit zeros included) are
    the structure S(A); ``Q`` the noise precision.  ``prior_structure`` is the
    candidate pattern used when learning A (defaults to S(A)).
    """

    A: sp.csr_matrix
    Q: SparseSym
    observation: str = "gaussian"  # gaussian | poisson | lgcp
    v_obs: float = 1.0
    p_obs: float = 1.0
    mesh: Optional[Mesh] = None
    dt: float = 1.0
    prior_structure: Optional[sp.csr_matrix] = None
    B: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.A.sort_indices()
        if self.A.shape != (self.Q.n, self.Q.n):
            raise ValidationError("A and Q dimensions differ")
        if self.observation not in ("gaussian", "poisson", "lgcp"):
            raise ValidationError(f"unknown observation model {self.observation!r}")
        if self.observation == "lgcp" and (self.mesh is None or self.mesh.n != self.n):
            raise ValidationError("lgcp observations need a mesh with one vertex per state")
        if not self.v_obs > 0 or not 0 <= self.p_obs <= 1 or not self.dt > 0:
            raise ValidationError("invalid observation parameters")

    @property
    def n(self):
        return self.Q.n

    @property
    def structure(self):
        S = self.prior_structure if self.prior_structure is not None else self.A
        S = sp.csr_matrix(S, copy=True)
        S.data = np.ones_like(S.data)
        return S


@dataclass
class Observations:
    """Per-(t, j) observation terms in exact-plus-site form.

    The likelihood of x_t is exp(sum_j lin[t,j] x_j - prec[t,j] x_j^2 / 2
    - eta[t,j] e^{x_j} + const[t]).  Raw data are kept for export.
    """

    kind: str
    lin: np.ndarray
    prec: np.ndarray
    eta: np.ndarray
    const: np.ndarray
    y: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    events: Optional[list] = None

    @property
    def T(self):
        return self.lin.shape[0]

    @property
    def n(self):
        return self.lin.shape[1]

    def window(self, t0, t1):
        sl = slice(t0, t1)
        return Observations(self.kind, self.lin[sl], self.prec[sl], self.eta[sl], self.const[sl],
                            None if self.y is None else self.y[sl], None if self.mask is None else self.mask[sl],
                            None if self.events is None else self.events[sl])


def gaussian_observations(y, mask, v_obs):
    y = np.asarray(y, float)
    mask = np.asarray(mask, bool)
    yy = np.where(mask, y, 0.0)
    lin = np.where(mask, yy / v_obs, 0.0)
    prec = np.where(mask, 1.0 / v_obs, 0.0)
    const = np.where(mask, -0.5 * yy ** 2 / v_obs - 0.5 * np.log(2 * np.pi * v_obs), 0.0).sum(axis=1)
    return Observations("gaussian", lin, prec, np.zeros_like(lin), const, y=np.where(mask, y, np.nan), mask=mask)


def poisson_observations(counts, eta=1.0):
    """Counts y ~ Poisson(eta e^x); ``eta`` is the exposure (scalar or per entry)."""
    y = np.asarray(counts, float)
    if np.any(y < 0):
        raise ValidationError("counts must be non-negative")
    e = np.broadcast_to(np.asarray(eta, float), y.shape).copy()
    if np.any(e <= 0):
        raise ValidationError("exposure must be positive")
    const = (y * np.log(e) - gammaln(y + 1)).sum(axis=1)
    return Observations("poisson", y.copy(), np.zeros_like(y), e, const, y=y)


def lgcp_observations(mesh: Mesh, dt, events):
    """Events per bin -> counts term 1^T C2 and weights dt * basis volume."""
    T = len(events)
    eta = np.tile(dt * mesh.basis_volumes(), (T, 1))
    lin = np.stack([event_weights(mesh, e) for e in events]) if T else np.zeros((0, mesh.n))
    return Observations("lgcp", lin, np.zeros_like(lin), eta, np.zeros(T),
                        events=[np.asarray(e, float).reshape(-1, 2) for e in events])


# transition models ------------------------------------------------------------------

def build_1d_model(n: int, n_neighb: int, eps_a: float, v_x: float, s: float):
    """Banded diffusion A and noise precision Q(v_x, s) on a 1D grid.

    Rows of A carry (1 - eps_a) / k_i on the k_i grid points within distance
    n_neighb (k_i = 1 + 2 n_neighb away from the boundary), so every row sums
    to 1 - eps_a.  Q = v_x^-1 D R D with R = I + 10^s R1, R1 the precision of
    sum_i (x_{i+1} - x_i)^2 and D = sqrt(diag(R^-1)); the implied noise
    marginal variances are all v_x.
    """
    if n < 2 or not 1 <= n_neighb < n or not v_x > 0 or not 0 <= eps_a < 1:
        raise ValidationError("invalid 1D model parameters")
    rows, cols, vals = [], [], []
    for i in range(n):
        lo, hi = max(0, i - n_neighb), min(n - 1, i + n_neighb)
        k = hi - lo + 1
        for j in range(lo, hi + 1):
            rows.append(i)
            cols.append(j)
            vals.append((1.0 - eps_a) / k)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    R1 = np.diag(np.r_[1.0, np.full(n - 2, 2.0), 1.0]) - np.eye(n, k=1) - np.eye(n, k=-1)
    R = np.eye(n) + 10.0 ** s * R1
    d = np.sqrt(np.diag(np.linalg.inv(R)))
    Qd = (d[:, None] * R * d[None, :]) / v_x
    Q = SparseSym.from_dense(Qd)
    return A, Q


def rotation_transition(mesh: Mesh, w: float, eps_w: float):
    """Directed transition on a disc mesh producing a rotating field.

    An incoming edge (i, j) survives unless the 2D cross product
    (s_j - s_i) x s_i is strictly negative.  A_ii = w and the surviving
    in-neighbours share 1 - eps_w - w equally.
    """
    if not 0 <= w <= 1 - eps_w or not 0 <= eps_w < 1:
        raise ValidationError("need 0 <= w <= 1 - eps_w")
    V = mesh.vertices
    e = mesh.edges()
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    d = V[j] - V[i]
    cross = d[:, 0] * V[i, 1] - d[:, 1] * V[i, 0]
    keep = cross >= 0
    i, j = i[keep], j[keep]
    deg = np.bincount(i, minlength=mesh.n)
    if np.any(deg == 0):
        log.info("%d nodes have no incoming neighbours", int(np.sum(deg == 0)))
    off = (1.0 - eps_w - w) / np.maximum(deg[i], 1)
    rows = np.concatenate([np.arange(mesh.n), i])
    cols = np.concatenate([np.arange(mesh.n), j])
    vals = np.concatenate([np.full(mesh.n, w), off])
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n, mesh.n))


def grid_structure(mesh: Mesh):
    """Symmetric candidate structure of the mesh (edges both ways plus the diagonal)."""
    e = mesh.edges()
    n = mesh.n
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def build_2d_rotation(mesh: Mesh, w: float, eps_w: float = 0.05, sigma2: float = 1.0, observation="lgcp",
                      dt: float = 1.0) -> ModelSpec:
    if not sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    A = rotation_transition(mesh, w, eps_w)
    Q = SparseSym.from_coo(mesh.n, np.arange(mesh.n), np.arange(mesh.n), np.full(mesh.n, 1.0 / sigma2))
    return ModelSpec(A, Q, observation=observation, mesh=mesh, dt=dt, prior_structure=grid_structure(mesh),
                     meta=dict(builder="rotation", w=w, eps_w=eps_w, sigma2=sigma2))


def build_1d_spec(n, n_neighb, eps_a, v_sys, s, observation="gaussian", v_obs=1.0, p_obs=1.0) -> ModelSpec:
    A, Q = build_1d_model(n, n_neighb, eps_a, v_sys, s)
    return ModelSpec(A, Q, observation=observation, v_obs=v_obs, p_obs=p_obs,
                     meta=dict(builder="oned", n_neighb=n_neighb, eps_a=eps_a, v_sys=v_sys, s=s))


# stationary moments and simulation --------------------------------------------------------

def noise_covariance(Q: SparseSym):
    P = Q.to_dense()
    c = sla.cho_factor(P, lower=True)
    return sla.cho_solve(c, np.eye(Q.n))


def stationary_moments(A, Q, tol=1e-12, max_doublings=64):
    """(m_inf, V_inf) with V_inf = A V_inf A^T + Q^-1, by the doubling iteration.

    After k doublings V holds sum_{l < 2^k} A^l Q^-1 A^lT, so the update
    size equals the remaining tail; stops once it is below ``tol``.
    """
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, float)
    W = noise_covariance(Q) if isinstance(Q, SparseSym) else np.linalg.inv(np.asarray(Q, float))
    V = W.copy()
    M = Ad.copy()
    for _ in range(max_doublings):
        dV = M @ V @ M.T
        V = V + dV
        M = M @ M
        if not np.all(np.isfinite(V)):
            break
        if np.max(np.abs(dV)) < tol:
            V = 0.5 * (V + V.T)
            return np.zeros(Ad.shape[0]), V
    raise NotStable("transition matrix is not stable (spectral radius >= 1)")


def inference_prior(V_inf):
    """Diagonal Gaussian prior on x_0 matching the stationary marginal variances."""
    d = np.diag(V_inf)
    n = len(d)
    return np.zeros(n), SparseSym.from_coo(n, np.arange(n), np.arange(n), 1.0 / d)


@dataclass
class Simulation:
    X: np.ndarray  # (T, n) latent path
    obs: Observations
    U: Optional[np.ndarray] = None


def simulate_path(spec: ModelSpec, T: int, seed: int, V_inf=None, U=None, x0=None):
    """Path started from N(0, V_inf) (the stationary law by default) or at ``x0``."""
    n = spec.n
    X = np.empty((T, n))
    if x0 is not None:
        X[0] = x0
    else:
        if V_inf is None:
            _, V_inf = stationary_moments(spec.A, spec.Q)
        X[0] = np.linalg.cholesky(V_inf) @ rng_stream(seed, "x0").standard_normal(n)
    Lq = np.linalg.cholesky(spec.Q.to_dense())
    A = spec.A
    for t in range(1, T):
        z = rng_stream(seed, "noise", t).standard_normal(n)
        X[t] = A @ X[t - 1] + sla.solve_triangular(Lq, z, lower=True, trans="T")
        if U is not None and spec.B is not None:
            X[t] += spec.B @ U[t - 1]
    return X


def sample_lgcp_events(mesh: Mesh, x, dt, rng, safety=1.2):
    """Thinning: homogeneous proposals at rate safety * max_j e^{x_j} over the mesh."""
    lam_max = safety * float(np.exp(np.max(x)))
    areas = mesh.areas()
    total = areas.sum()
    N = rng.poisson(lam_max * total * dt)
    if N == 0:
        return np.zeros((0, 2))
    tri = rng.choice(mesh.n_triangles, size=N, p=areas / total)
    r1, r2 = rng.random(N), rng.random(N)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    P = mesh.vertices[mesh.triangles[tri]]
    pts = P[:, 0] + r1[:, None] * (P[:, 1] - P[:, 0]) + r2[:, None] * (P[:, 2] - P[:, 0])
    bary = np.column_stack([1 - r1 - r2, r1, r2])
    field_vals = np.einsum("ij,ij->i", bary, x[mesh.triangles[tri]])
    accept = rng.random(N) < np.exp(field_vals) / lam_max
    return pts[accept]


def simulate_observations(spec: ModelSpec, X, seed) -> Observations:
    T, n = X.shape
    if spec.observation == "gaussian":
        mask = np.stack([rng_stream(seed, "mask", t).random(n) < spec.p_obs for t in range(T)])
        noise = np.stack([rng_stream(seed, "obs", t).standard_normal(n) for t in range(T)])
        return gaussian_observations(X + np.sqrt(spec.v_obs) * noise, mask, spec.v_obs)
    if spec.observation == "poisson":
        counts = np.stack([rng_stream(seed, "obs", t).poisson(np.exp(X[t])) for t in range(T)])
        return poisson_observations(counts)
    events = [sample_lgcp_events(spec.mesh, X[t], spec.dt, rng_stream(seed, "events", t)) for t in range(T)]
    return lgcp_observations(spec.mesh, spec.dt, events)


def simulate(spec: ModelSpec, T: int, seed: int, U=None) -> Simulation:
    """Latent path from the stationary distribution followed by observations."""
    if T < 1:
        raise ValidationError("T must be positive")
    X = simulate_path(spec, T, seed, U=U)
    return Simulation(X, simulate_observations(spec, X, seed), U)
