"""Univariate observation sites and their EP moment-matching updates.

A site ``expcox`` is psi(z) = exp(h z - eta e^z).  In the engine the count
term h z is absorbed exactly into the Gaussian part, so only the
exp(-eta e^z) factor is approximated there.  Gaussian sites are conjugate
and handled in closed form.  Cavities are univariate canonical pairs (h, q).

The stand-alone moment functions use a cascade of rules, each accepted
only when it agrees with a coarser rule of the same kind: plain
Gauss-Hermite centred on the cavity, then Gauss-Hermite centred on the
Laplace approximation, then a trapezoid rule over a window that provably
holds all but e^-50 of the mass.  The batch kernel used inside message
passing applies the Laplace-centred rule throughout, since switching rules
between iterations makes the fixed-point map discontinuous.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .errors import ImproperTilted, NewtonDiverged, NonFiniteMoment, ValidationError

LOG2PI = np.log(2.0 * np.pi)

OK_GH, OK_LAPLACE, OK_GRID, FAIL_NEWTON, FAIL_IMPROPER, FAIL_NONFINITE = 0, 1, 2, 3, 4, 5

# accepted discrepancy between a rule and its coarser companion (standardised units)
RULE_TOL = 1e-8
GRID_POINTS = 4001
GRID_DROP = 50.0


@dataclass(frozen=True)
class SiteFunction:
    kind: str  # "expcox", "gaussian" or "absent"
    h: float = 0.0
    eta: float = 0.0
    y: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if self.kind not in ("expcox", "gaussian", "absent"):
            raise ValidationError(f"unknown site kind {self.kind!r}")
        if self.kind == "expcox" and not self.eta > 0:
            raise ValidationError("expcox sites need eta > 0")
        if self.kind == "gaussian" and not self.v > 0:
            raise ValidationError("gaussian sites need v > 0")

    @classmethod
    def expcox(cls, h, eta):
        return cls("expcox", h=float(h), eta=float(eta))

    @classmethod
    def gaussian(cls, y, v):
        return cls("gaussian", y=float(y), v=float(v))

    @classmethod
    def absent(cls):
        return cls("absent")

    def log_psi(self, z):
        z = np.asarray(z, float)
        if self.kind == "expcox":
            return self.h * z - self.eta * np.exp(z)
        if self.kind == "gaussian":
            return -0.5 * (z - self.y) ** 2 / self.v - 0.5 * np.log(2 * np.pi * self.v)
        return np.zeros_like(z)


@lru_cache(maxsize=16)
def gh_rule(nodes: int):
    """Probabilists' Gauss-Hermite nodes and log-weights normalised to sum to one."""
    if nodes < 2:
        raise ValidationError("need at least two quadrature nodes")
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return x, np.log(w / w.sum())


def _rules(nodes):
    x1, l1 = gh_rule(nodes)
    x2, l2 = gh_rule(max(2, (3 * nodes) // 4))
    return x1, l1, x2, l2


@njit(cache=True, nogil=True)
def _reduce(lf, xs):
    """log-sum, mean and variance of xs under weights exp(lf)."""
    mx = -np.inf
    for i in range(lf.shape[0]):
        if lf[i] > mx:
            mx = lf[i]
    if not np.isfinite(mx):
        return np.nan, np.nan, np.nan
    tot = 0.0
    m = 0.0
    for i in range(lf.shape[0]):
        w = np.exp(lf[i] - mx)
        tot += w
        m += w * xs[i]
    m /= tot
    v = 0.0
    for i in range(lf.shape[0]):
        d = xs[i] - m
        v += np.exp(lf[i] - mx) * d * d
    return mx + np.log(tot), m, v / tot


@njit(cache=True, nogil=True)
def _cavity_rule(hc, h, q, eta, xs, lw):
    """GH against the cavity N(h/q, 1/q) of psi(z) = exp(hc z - eta e^z)."""
    mu = h / q
    s = 1.0 / np.sqrt(q)
    lf = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        z = mu + s * xs[i]
        lf[i] = lw[i] + hc * z - eta * np.exp(z)
    return _reduce(lf, xs)


@njit(cache=True, nogil=True)
def _close(a1, m1, v1, a2, m2, v2):
    if not (np.isfinite(a1) and np.isfinite(m1) and v1 > 0.0):
        return False
    return abs(a1 - a2) <= RULE_TOL and abs(m1 - m2) <= RULE_TOL and abs(v1 - v2) <= RULE_TOL * max(1.0, v1)


@njit(cache=True, nogil=True)
def _gh(hc, h, q, eta, x1, l1, x2, l2):
    """Plain cavity-centred GH; returns logZ, mean, var, status."""
    a1, m1, v1 = _cavity_rule(hc, h, q, eta, x1, l1)
    a2, m2, v2 = _cavity_rule(hc, h, q, eta, x2, l2)
    s = 1.0 / np.sqrt(q)
    mean = h / q + s * m1
    if not _close(a1, m1, v1, a2, m2, v2):
        return a1, mean, s * s * v1, FAIL_NONFINITE
    return a1, mean, s * s * v1, OK_GH


@njit(cache=True, nogil=True)
def _mode(h, q, eta):
    """Root of eta e^z + q z - h (the tilted mode); returns (z, converged).

    The function is increasing and convex, so Newton started to the right
    of the root decreases monotonically onto it.
    """
    if h > 0.0:
        z = min(h / q, max(0.0, np.log(h / eta)))
    else:
        z = h / q
    for _ in range(100):
        ez = np.exp(z)
        f = eta * ez + q * z - h
        step = f / (eta * ez + q)
        if not np.isfinite(step):
            return z, False
        if step <= 0.0:
            return z, True
        z -= step
        if step < 1e-12 * max(1.0, abs(z)):
            return z, True
    return z, False


@njit(cache=True, nogil=True)
def _laplace_rule(zhat, s, q, c, xs, lw):
    """GH centred on N(zhat, s^2); c = eta e^zhat.  Returns log-sum, mean_x, var_x."""
    lf = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        u = s * xs[i]
        # g(zhat + u) - g(zhat) for g(z) = h z - q z^2/2 - eta e^z, using h - q zhat = c
        lf[i] = lw[i] - 0.5 * q * u * u - c * (np.expm1(u) - u) + 0.5 * xs[i] * xs[i]
    return _reduce(lf, xs)


@njit(cache=True, nogil=True)
def _laplace_gh(h, q, eta, x1, l1, x2, l2):
    zhat, ok = _mode(h, q, eta)
    if not ok:
        return np.nan, np.nan, np.nan, FAIL_NEWTON
    c = eta * np.exp(zhat)
    s = 1.0 / np.sqrt(q + c)
    a1, m1, v1 = _laplace_rule(zhat, s, q, c, x1, l1)
    a2, m2, v2 = _laplace_rule(zhat, s, q, c, x2, l2)
    mu = h / q
    # g(zhat) minus the cavity log-normaliser, plus the GH Jacobian
    base = -0.5 * q * (zhat - mu) ** 2 - c + np.log(s) + 0.5 * np.log(q)
    st = OK_LAPLACE if _close(a1, m1, v1, a2, m2, v2) else FAIL_NONFINITE
    return a1 + base, zhat + s * m1, s * s * v1, st


@njit(cache=True, nogil=True)
def _grid(h, q, eta):
    """Trapezoid rule over [zhat - sqrt(2D/q), zhat + sqrt(2D/(q + eta e^zhat))]."""
    zhat, ok = _mode(h, q, eta)
    if not ok:
        return np.nan, np.nan, np.nan, FAIL_NEWTON
    c = eta * np.exp(zhat)
    lo = -np.sqrt(2.0 * GRID_DROP / q)
    hi = np.sqrt(2.0 * GRID_DROP / (q + c))
    n = GRID_POINTS
    du = (hi - lo) / (n - 1)
    us = np.empty(n)
    lf = np.empty(n)
    for i in range(n):
        u = lo + i * du
        us[i] = u
        lf[i] = -0.5 * q * u * u - c * (np.expm1(u) - u)
    lf[0] += np.log(0.5)
    lf[n - 1] += np.log(0.5)
    a, m, v = _reduce(lf, us)
    mu = h / q
    logz = a + np.log(du) - 0.5 * q * (zhat - mu) ** 2 - c + 0.5 * np.log(q / (2 * np.pi))
    if not (np.isfinite(logz) and v > 0.0):
        return logz, zhat + m, v, FAIL_NONFINITE
    return logz, zhat + m, v, OK_GRID


@njit(cache=True, nogil=True)
def _tilted(h, q, eta, x1, l1, x2, l2):
    a, m, v, st = _gh(0.0, h, q, eta, x1, l1, x2, l2)
    if st == OK_GH:
        return a, m, v, st
    a, m, v, st = _laplace_gh(h, q, eta, x1, l1, x2, l2)
    if st == OK_LAPLACE:
        return a, m, v, st
    return _grid(h, q, eta)


@njit(cache=True, nogil=True)
def expcox_tilted_batch(h, q, eta, x1, l1, x2, l2, cascade=False):
    """Moments of exp(-eta e^z) N(z; h/q, 1/q) elementwise.

    Laplace-centred GH unless ``cascade``; the trapezoid window is used when
    that rule fails.  ``eta == 0`` entries return the cavity moments.  logZ
    is relative to the normalised cavity.
    """
    n = h.shape[0]
    logz = np.zeros(n)
    mean = np.zeros(n)
    var = np.zeros(n)
    status = np.zeros(n, np.int64)
    for i in range(n):
        if not q[i] > 0.0:
            status[i] = FAIL_IMPROPER
            logz[i] = np.nan
            mean[i] = np.nan
            var[i] = np.nan
            continue
        if eta[i] == 0.0:
            mean[i] = h[i] / q[i]
            var[i] = 1.0 / q[i]
            continue
        if cascade:
            a, b, c, st = _tilted(h[i], q[i], eta[i], x1, l1, x2, l2)
        else:
            a, b, c, st = _laplace_gh(h[i], q[i], eta[i], x1, l1, x2, l2)
            if not (np.isfinite(a) and np.isfinite(b) and c > 0.0):
                a, b, c, st = _grid(h[i], q[i], eta[i])
            else:
                st = OK_LAPLACE
        logz[i] = a
        mean[i] = b
        var[i] = c
        status[i] = st
    return logz, mean, var, status


def _proper(cavity):
    h, q = float(cavity[0]), float(cavity[1])
    if not q > 0:
        raise ImproperTilted(f"cavity precision {q} is not positive")
    return h, q


def _log_norm(h, q):
    return 0.5 * h * h / q - 0.5 * np.log(q) + 0.5 * LOG2PI


def _closed_form(site: SiteFunction, h, q):
    if site.kind == "absent":
        return 0.0, h / q, 1.0 / q
    # gaussian: psi(z) = N(y; z, v)
    qn = q + 1.0 / site.v
    hn = h + site.y / site.v
    mu, s2 = h / q, 1.0 / q + site.v
    logz = -0.5 * (site.y - mu) ** 2 / s2 - 0.5 * np.log(2 * np.pi * s2)
    return logz, hn / qn, 1.0 / qn


def _check_nodes(nodes):
    if nodes < 8:
        raise ValidationError("at least 8 quadrature nodes required")


def tilted_moments_gh(site: SiteFunction, cavity, nodes: int = 32):
    """(logZ, mean, var) of psi(z) N(z; h/q, 1/q) by GH centred on the cavity.

    logZ is the log of the integral of psi against the normalised cavity.
    Raises NonFiniteMoment when the integrand is not finite or the rule
    disagrees with its coarser companion, i.e. the nodes do not resolve the
    tilted mass.
    """
    _check_nodes(nodes)
    h, q = _proper(cavity)
    if site.kind != "expcox":
        return _closed_form(site, h, q)
    a, m, v, st = _gh(site.h, h, q, site.eta, *_rules(nodes))
    if st != OK_GH:
        raise NonFiniteMoment("cavity-centred Gauss-Hermite does not resolve the tilted distribution")
    return a, m, v


def tilted_moments_laplace_gh(site: SiteFunction, cavity, nodes: int = 32):
    """As tilted_moments_gh, with the rule centred on the Laplace approximation."""
    _check_nodes(nodes)
    h, q = _proper(cavity)
    if site.kind != "expcox":
        return _closed_form(site, h, q)
    hs = h + site.h
    a, m, v, st = _laplace_gh(hs, q, site.eta, *_rules(nodes))
    if st == FAIL_NEWTON:
        raise NewtonDiverged("mode search did not converge")
    if not (np.isfinite(a) and np.isfinite(m) and v > 0):
        raise NonFiniteMoment("non-finite tilted moments")
    return a + _log_norm(hs, q) - _log_norm(h, q), m, v


def tilted_moments(site: SiteFunction, cavity, nodes: int = 32):
    """Cascade: cavity GH, Laplace GH, then the trapezoid window."""
    _check_nodes(nodes)
    h, q = _proper(cavity)
    if site.kind != "expcox":
        return _closed_form(site, h, q)
    hs = h + site.h
    a, m, v, st = _tilted(hs, q, site.eta, *_rules(nodes))
    if st == FAIL_NEWTON:
        raise NewtonDiverged("mode search did not converge")
    if st > OK_GRID:
        raise NonFiniteMoment("non-finite tilted moments")
    return a + _log_norm(hs, q) - _log_norm(h, q), m, v


@dataclass(frozen=True)
class SiteMessagePair:
    lam0: tuple = (0.0, 0.0)
    laml: tuple = (0.0, 0.0)
    last_update_magnitude: float = 0.0


def ep_site_update(pair: SiteMessagePair, site: SiteFunction, damping: float = 1.0, power: float = 1.0,
                   nodes: int = 32) -> SiteMessagePair:
    """Refresh lam0 so that lam0 * laml matches the moments of psi * laml.

    With ``power`` p < 1 the fractional update uses the cavity
    laml + (1 - p) lam0 and psi^p.  The new lam0 is blended with the old one
    using ``damping``.
    """
    if not 0 < damping <= 1 or not 0 < power <= 1:
        raise ValidationError("damping and power must lie in (0, 1]")
    l0h, l0q = pair.lam0
    cav = (pair.laml[0] + (1 - power) * l0h, pair.laml[1] + (1 - power) * l0q)
    if not cav[1] > 0:
        raise ImproperTilted("cavity precision is not positive")
    if site.kind == "absent":
        new = (0.0, 0.0)
    elif site.kind == "gaussian":
        new = (site.y / site.v, 1.0 / site.v)
    else:
        powered = SiteFunction.expcox(site.h * power, site.eta * power)
        _, m, v = tilted_moments(powered, cav, nodes)
        cand = ((m / v - cav[0]) / power, (1.0 / v - cav[1]) / power)
        new = ((1 - damping) * l0h + damping * cand[0], (1 - damping) * l0q + damping * cand[1])
    mag = max(abs(new[0] - l0h), abs(new[1] - l0q))
    return SiteMessagePair(new, pair.laml, mag)


def site_update_batch(marg_mean, marg_var, lam0_h, lam0_q, eta, power=1.0, damping=1.0, nodes=32, cascade=False):
    """Vectorised EP refresh of the approximations to exp(-eta e^x).

    ``marg_mean``/``marg_var`` are the current univariate marginals, which
    include the old lam0.  Returns new (lam0_h, lam0_q), the leave-one-out
    messages (laml_h, laml_q), log normalisers against the cavity and
    per-site status codes.  Sites with eta == 0 stay at zero; improper or
    failed sites keep their previous value.  ``cascade`` selects the
    validated rule cascade instead of the fixed Laplace-centred rule.
    """
    qm = 1.0 / marg_var
    lh = marg_mean * qm - lam0_h
    lq = qm - lam0_q
    ch = lh + (1 - power) * lam0_h
    cq = lq + (1 - power) * lam0_q
    logz, m, v, st = expcox_tilted_batch(ch, cq, eta * power, *_rules(nodes), cascade)
    active = eta > 0
    good = active & (st <= OK_GRID)
    with np.errstate(divide="ignore", invalid="ignore"):
        cand_h = (m / v - ch) / power
        cand_q = (1.0 / v - cq) / power
    nh = np.where(good, (1 - damping) * lam0_h + damping * cand_h, np.where(active, lam0_h, 0.0))
    nq = np.where(good, (1 - damping) * lam0_q + damping * cand_q, np.where(active, lam0_q, 0.0))
    st = np.where(active, st, OK_GH)
    return nh, nq, lh, lq, logz, st
