"""Finite signed measures on ``[-delta, 0]`` and the delay operations built on them.

A :class:`DelayMeasure` is a finite list of atoms plus an optional density.
On a :class:`TimeGrid` every measure becomes a vector of *lag weights*
``W[j]`` attached to the lags ``s = -j * dt``; atoms must fall on lags
exactly and the density is discretised with the trapezoid rule.  With those
weights

* the moving average is ``eta_d[i] = sum_j W[j] * eta[i - j]``, and
* the anticipated average is ``g_a[i] = sum_j W[j] * g[i + j]``.

Paths are arrays whose first axis runs over grid nodes.  Integrals over a
closed time interval ``[a, b]`` use the node rule ``dt * sum`` over every
node in the interval, both endpoints included.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import AlignmentError, PreconditionError

_ALIGN_TOL = 1e-9


def _as_steps(value, dt, what):
    """Return ``value / dt`` as an int, or raise if it is not a whole number."""
    ratio = value / dt
    k = int(round(ratio))
    if abs(ratio - k) > _ALIGN_TOL * max(1.0, abs(ratio)):
        raise AlignmentError(f"{what} = {value!r} is not an integer multiple of dt = {dt!r}")
    return k


class TimeGrid:
    """Uniform grid on ``[-delta, T + delta]`` with 0 and T on nodes.

    Parameters
    ----------
    dt : float
        Step size.  Must divide both ``T`` and ``delta``.
    T : float
        Horizon.
    delta : float
        Delay length, ``delta >= 0``.
    """

    def __init__(self, dt, T, delta):
        dt, T, delta = float(dt), float(T), float(delta)
        if not dt > 0:
            raise PreconditionError(f"dt must be positive, got {dt!r}")
        if not T > 0:
            raise PreconditionError(f"T must be positive, got {T!r}")
        if delta < 0:
            raise PreconditionError(f"delta must be non-negative, got {delta!r}")
        self.dt = dt
        self.T = T
        self.delta = delta
        self.n_delay = _as_steps(delta, dt, "delta")
        self.n_T = _as_steps(T, dt, "T")

    @property
    def i0(self):
        """Index of the node ``t = 0``."""
        return self.n_delay

    @property
    def iT(self):
        """Index of the node ``t = T``."""
        return self.n_delay + self.n_T

    @property
    def n_nodes(self):
        return self.n_T + 2 * self.n_delay + 1

    @property
    def t0(self):
        return -self.delta

    @property
    def t_end(self):
        return self.T + self.delta

    @property
    def times(self):
        return (np.arange(self.n_nodes) - self.n_delay) * self.dt

    def time(self, index):
        return (index - self.n_delay) * self.dt

    def index(self, t):
        """Node index of time ``t``; raises if ``t`` is off the grid."""
        k = _as_steps(t, self.dt, "time") + self.n_delay
        if not 0 <= k < self.n_nodes:
            raise PreconditionError(f"time {t!r} outside [{self.t0}, {self.t_end}]")
        return k

    def refine(self, factor=2):
        return TimeGrid(self.dt / factor, self.T, self.delta)

    def __eq__(self, other):
        return (isinstance(other, TimeGrid) and self.dt == other.dt
                and self.n_T == other.n_T and self.n_delay == other.n_delay)

    def __hash__(self):
        return hash((self.dt, self.n_T, self.n_delay))

    def __repr__(self):
        return f"TimeGrid(dt={self.dt!r}, T={self.T!r}, delta={self.delta!r})"


def _exp_density(lam):
    def rho(s):
        return np.exp(lam * np.asarray(s, dtype=float))
    return rho


def _const_density(value):
    def rho(s):
        return np.full(np.shape(s), float(value))
    return rho


class DelayMeasure:
    """Finite signed measure on ``[-delta, 0]``: atoms plus an optional density.

    Parameters
    ----------
    delta : float
        Length of the support interval.
    atoms : sequence of (location, weight)
        Each location must lie in the closed interval ``[-delta, 0]``.
    density : callable, optional
        Vectorised function ``rho(s)`` on ``[-delta, 0]``.
    """

    def __init__(self, delta, atoms=(), density=None):
        delta = float(delta)
        if delta < 0:
            raise PreconditionError(f"delta must be non-negative, got {delta!r}")
        clean = []
        tol = _ALIGN_TOL * max(1.0, delta)
        for s, w in atoms:
            s, w = float(s), float(w)
            if s < -delta - tol or s > tol:
                raise PreconditionError(f"atom location {s!r} outside [-{delta}, 0]")
            clean.append((min(0.0, max(-delta, s)), w))
        self.delta = delta
        self.atoms = tuple(clean)
        self.density = density

    # constructors --------------------------------------------------------
    @classmethod
    def dirac(cls, delta, location=None, weight=1.0):
        """Point mass at ``location`` (default ``-delta``)."""
        loc = -delta if location is None else location
        return cls(delta, [(loc, weight)])

    @classmethod
    def multipoint(cls, delta, locations, weights):
        return cls(delta, list(zip(locations, weights)))

    @classmethod
    def exponential(cls, delta, lam):
        """Density ``exp(lam * s)`` on ``[-delta, 0]``."""
        return cls(delta, density=_exp_density(float(lam)))

    @classmethod
    def uniform(cls, delta, value=1.0):
        return cls(delta, density=_const_density(float(value)))

    @classmethod
    def zero(cls, delta=0.0):
        return cls(delta)

    @classmethod
    def from_config(cls, cfg):
        """Build from the JSON measure section (see the README for the schema)."""
        kind = cfg.get("type")
        delta = float(cfg["delta"])
        atoms = [tuple(a) for a in cfg.get("atoms", [])]
        density = None
        if "density" in cfg and cfg["density"] is not None:
            d = cfg["density"]
            if d["kind"] == "exp":
                density = _exp_density(float(d["lambda"]))
            elif d["kind"] == "const":
                density = _const_density(float(d["value"]))
            else:
                raise PreconditionError(f"unknown density kind {d['kind']!r}")
        if kind == "dirac":
            if not atoms:
                atoms = [(-delta, 1.0)]
            if len(atoms) != 1:
                raise PreconditionError("a dirac measure has exactly one atom")
        elif kind == "density":
            if density is None:
                raise PreconditionError("a density measure needs a 'density' section")
        elif kind != "multipoint":
            raise PreconditionError(f"unknown measure type {kind!r}")
        return cls(delta, atoms, density)

    # properties ----------------------------------------------------------
    def is_atomic(self):
        return self.density is None

    def is_nonnegative(self, dt=None):
        """True when every weight is >= 0 and the density is >= 0 where sampled."""
        if any(w < 0 for _, w in self.atoms):
            return False
        if self.density is not None and self.delta > 0:
            s = np.linspace(-self.delta, 0.0, 2001)
            if dt is not None:
                s = np.concatenate([s, -np.arange(_as_steps(self.delta, dt, "delta") + 1) * dt])
            if np.any(np.asarray(self.density(s)) < 0):
                return False
        return True

    def lag_weights(self, dt):
        """Weights ``W[j]`` of the lags ``s = -j * dt``, ``j = 0..delta/dt``."""
        n = _as_steps(self.delta, dt, "measure delta")
        w = np.zeros(n + 1)
        for s, a in self.atoms:
            w[_as_steps(-s, dt, "atom location")] += a
        if self.density is not None and n > 0:
            rho = np.asarray(self.density(-np.arange(n + 1) * dt), dtype=float)
            trap = np.full(n + 1, dt)
            trap[[0, -1]] = 0.5 * dt
            w += rho * trap
        return w

    def __repr__(self):
        dens = "" if self.density is None else ", density"
        return f"DelayMeasure(delta={self.delta!r}, atoms={list(self.atoms)!r}{dens})"


def total_mass(m, dt=None):
    """Signed mass ``m([-delta, 0])``.

    With ``dt`` the density is integrated with the grid trapezoid rule,
    otherwise with adaptive quadrature.
    """
    if dt is not None:
        return float(np.sum(m.lag_weights(dt)))
    mass = sum(w for _, w in m.atoms)
    if m.density is not None and m.delta > 0:
        mass += integrate.quad(lambda s: float(m.density(s)), -m.delta, 0.0)[0]
    return float(mass)


def total_variation(m, dt=None):
    """Total variation ``|m|([-delta, 0])``."""
    if dt is not None:
        return float(np.sum(np.abs(m.lag_weights(dt))))
    tv = sum(abs(w) for _, w in m.atoms)
    if m.density is not None and m.delta > 0:
        tv += integrate.quad(lambda s: abs(float(m.density(s))), -m.delta, 0.0, limit=200)[0]
    return float(tv)


def lagged_sum(path, weights, indices, sign):
    """``sum_j weights[j] * path[i + sign * j]`` for each ``i`` in ``indices``.

    Vectorised kernel behind both averages.  ``sign = -1`` looks back,
    ``sign = +1`` looks ahead.
    """
    path = np.asarray(path)
    idx = np.asarray(indices)
    out = np.zeros((idx.size,) + path.shape[1:], dtype=np.result_type(path, weights))
    for j, wj in enumerate(weights):
        if wj != 0.0:
            out += wj * path[idx + sign * j]
    return out


def _check_window(path, index, lo, hi):
    if lo < 0 or hi >= len(path):
        raise PreconditionError(
            f"path of length {len(path)} does not cover nodes [{lo}, {hi}] needed at node {index}")


def moving_average(path, m, grid, index):
    """``eta_d(t) = sum over atoms and density of eta(t + s) m(ds)`` at node ``index``."""
    w = m.lag_weights(grid.dt)
    _check_window(path, index, index - len(w) + 1, index)
    return lagged_sum(path, w, [index], -1)[0]


def anticipated_average(path, m, grid, index):
    """``g_a(t) = integral of g(t - s) m(ds)`` at node ``index``."""
    w = m.lag_weights(grid.dt)
    _check_window(path, index, index, index + len(w) - 1)
    return lagged_sum(path, w, [index], +1)[0]


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return (a * b).reshape(a.shape[0], -1).sum(axis=1)


def _time_weights(grid, rule):
    n = grid.n_T + 1
    c = np.full(n, grid.dt)
    if rule == "trapezoid":
        c[[0, -1]] = 0.5 * grid.dt
    elif rule != "node":
        raise PreconditionError(f"unknown quadrature rule {rule!r}")
    return c


def duality_sides(eta, g, m, grid, rule="node"):
    """Both sides of ``int_0^T <eta_d, g> dt = int_0^T <eta, g_a> dt``.

    ``eta`` must vanish on ``[-delta, 0)`` and ``g`` on ``(T, T + delta]``;
    both are full-grid paths.  ``rule`` is the time quadrature: ``"node"``
    (closed-interval node sum, under which the identity is exact for any
    lag weights) or ``"trapezoid"``.
    """
    eta = np.asarray(eta, dtype=float)
    g = np.asarray(g, dtype=float)
    if eta.shape[0] != grid.n_nodes or g.shape[0] != grid.n_nodes:
        raise PreconditionError("paths must cover every grid node")
    if np.any(eta[:grid.i0] != 0.0):
        raise PreconditionError("eta must vanish on [-delta, 0)")
    if np.any(g[grid.iT + 1:] != 0.0):
        raise PreconditionError("g must vanish on (T, T + delta]")
    w = m.lag_weights(grid.dt)
    if len(w) - 1 > grid.n_delay:
        raise PreconditionError("measure support is longer than the grid delay")
    nodes = np.arange(grid.i0, grid.iT + 1)
    c = _time_weights(grid, rule)
    lhs = float(np.dot(c, _pair(lagged_sum(eta, w, nodes, -1), g[nodes])))
    rhs = float(np.dot(c, _pair(eta[nodes], lagged_sum(g, w, nodes, +1))))
    return lhs, rhs


def duality_residual(eta, g, m, grid, rule="node"):
    """Left side minus right side of the delay duality identity."""
    lhs, rhs = duality_sides(eta, g, m, grid, rule)
    return lhs - rhs


@dataclass(frozen=True)
class InequalityReport:
    lhs: float
    rhs: float
    holds: bool
    tolerance: float


def _sq_norms(path):
    path = np.asarray(path, dtype=float)
    return (path ** 2).reshape(path.shape[0], -1).sum(axis=1)


def _check_weight(weight, lo, hi, increasing):
    lam = np.asarray(weight, dtype=float)[lo:hi + 1]
    if np.any(lam < 0):
        raise PreconditionError("the weight function must be non-negative")
    d = np.diff(lam)
    if increasing and np.any(d < 0):
        raise PreconditionError("the weight function must be non-decreasing")
    if not increasing and np.any(d > 0):
        raise PreconditionError("the weight function must be non-increasing")


def _require_measure(m, dt):
    if not m.is_nonnegative(dt):
        raise PreconditionError(
            "the delay inequalities hold for non-negative measures only; "
            "signed weights were found")


def check_delay_inequality(eta, m, weight, grid, index):
    """Check ``int_0^t lam |eta_d|^2 <= m^2 int_{-delta}^t lam |eta|^2``.

    ``weight`` is a full-grid array of non-negative, non-increasing values;
    ``index`` is the node of ``t``.  Integrals use the node rule.
    """
    _require_measure(m, grid.dt)
    _check_weight(weight, 0, index, increasing=False)
    w = m.lag_weights(grid.dt)
    lam = np.asarray(weight, dtype=float)
    nodes = np.arange(grid.i0, index + 1)
    eta_d = lagged_sum(eta, w, nodes, -1)
    lhs = grid.dt * float(np.dot(lam[nodes], _sq_norms(eta_d)))
    all_nodes = np.arange(0, index + 1)
    rhs = float(np.sum(w)) ** 2 * grid.dt * float(np.dot(lam[all_nodes], _sq_norms(np.asarray(eta)[all_nodes])))
    tol = 1e-10 * max(1.0, abs(rhs))
    return InequalityReport(lhs, rhs, lhs <= rhs + tol, tol)


def check_anticipated_inequality(zeta, m, weight, grid, index):
    """Check ``int_t^T lam |zeta_a|^2 <= m^2 int_t^{T+delta} lam |zeta|^2``.

    ``weight`` must be non-negative and non-decreasing on ``[t, T + delta]``.
    """
    _require_measure(m, grid.dt)
    _check_weight(weight, index, grid.n_nodes - 1, increasing=True)
    w = m.lag_weights(grid.dt)
    lam = np.asarray(weight, dtype=float)
    nodes = np.arange(index, grid.iT + 1)
    zeta_a = lagged_sum(zeta, w, nodes, +1)
    lhs = grid.dt * float(np.dot(lam[nodes], _sq_norms(zeta_a)))
    tail = np.arange(index, grid.n_nodes)
    rhs = float(np.sum(w)) ** 2 * grid.dt * float(np.dot(lam[tail], _sq_norms(np.asarray(zeta)[tail])))
    tol = 1e-10 * max(1.0, abs(rhs))
    return InequalityReport(lhs, rhs, lhs <= rhs + tol, tol)
