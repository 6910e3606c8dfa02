"""Hamiltonian, adjoint processes, maximum-principle gradient and projected descent.

For a control ``u`` the pipeline is

1. forward state ``x`` (:func:`~delaysmp.sdee_forward.solve_sdee`),
2. utility ``(y, z)`` and cost ``J = y(0)``,
3. the weight process ``k`` (``k(0) = -1``) driven by the ``y``/``z``
   partials of the generator,
4. the adjoint pair ``(p, q)`` from the anticipated backward equation with
   ``M = A^*``, ``N = B^*``, terminal ``-k(T) h_x`` and running datum
   ``-E_t[k(T) h_xnu]`` against ``F(dt) = nu(d(t - T))``,
5. the gradient ``G(t) = H_u(t) + E_t[int H_ud(t - s) m(ds)]``, with
   ``H = <b, p>_H + <sigma, q>_{L2^0} - f k``.

Discretisation is arranged so that, for open-loop controls and the
``exact-linear`` estimator, ``dt * sum_i <G_i, v_i>`` is the exact
directional derivative of the discrete cost.  The Hamiltonian at node ``i``
reads ``(p_i, q_i)`` from the sweep in :mod:`absde_backward`, is defined on
the nodes of ``[0, T)`` and vanishes from ``T`` on.

Controls are arrays on the nodes of ``[-delta, T]``; nodes before 0 hold the
frozen initial segment, nodes ``0 .. T - dt`` are free, the value at ``T``
does not influence the cost.
"""

from dataclasses import dataclass, field

import numpy as np

from .absde_backward import (BackwardPair, CondEstimator, RunningTerminal, solve_absee,
                             solve_recursive_utility, terminal_delay)
from .delay_measures import lagged_sum
from .errors import PreconditionError
from .hilbert_core import sample_increments
from .sdee_forward import control_nodes, solve_linear_sdde_scalar, solve_sdee


class AdmissibleSet:
    """Convex control set applied node-wise: whole space, a box or a ball."""

    def __init__(self, kind="whole", lower=None, upper=None, center=None, radius=None, m=1):
        if kind not in ("whole", "box", "ball"):
            raise PreconditionError(f"only convex sets are accepted, got {kind!r}")
        self.kind = kind
        self.m = m
        if kind == "box":
            self.lower = np.broadcast_to(np.asarray(lower, float), (m,)).copy()
            self.upper = np.broadcast_to(np.asarray(upper, float), (m,)).copy()
            if np.any(self.lower > self.upper):
                raise PreconditionError("box lower bound exceeds upper bound")
        if kind == "ball":
            self.center = np.zeros(m) if center is None else np.broadcast_to(np.asarray(center, float), (m,)).copy()
            self.radius = float(radius)
            if not self.radius > 0:
                raise PreconditionError("ball radius must be positive")

    @classmethod
    def from_config(cls, cfg, m):
        cfg = dict(cfg or {"kind": "whole"})
        kind = cfg.pop("kind", "whole")
        return cls(kind, m=m, **cfg)

    def project(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "whole":
            return u.copy()
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        d = u - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(r > self.radius, self.radius / np.maximum(r, 1e-300), 1.0)
        return self.center + d * scale

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.kind == "whole":
            return True
        if self.kind == "box":
            return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))
        return bool(np.all(np.linalg.norm(u - self.center, axis=-1) <= self.radius + tol))

    def sample(self, rng, shape):
        """Random admissible points of the given leading ``shape``."""
        shape = tuple(shape) + (self.m,)
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, size=shape)
        if self.kind == "ball":
            d = rng.standard_normal(shape)
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            r = self.radius * rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / self.m)
            return self.center + r * d
        return rng.standard_normal(shape)

    def linear_minimizer(self, G, u):
        """Admissible ``w`` minimising ``<G, w - u>`` node-wise (``None`` if unbounded)."""
        if self.kind == "box":
            return np.where(G > 0, self.lower, self.upper)
        if self.kind == "ball":
            n = np.linalg.norm(G, axis=-1, keepdims=True)
            return self.center - self.radius * G / np.maximum(n, 1e-300)
        return None


@dataclass
class ControlProblem:
    """Coefficients of one controlled delayed system with recursive utility.

    ``bundle`` holds ``A``, ``B``, ``b``, ``sigma`` and their derivatives;
    ``f`` is a :class:`~delaysmp.absde_backward.Generator` and ``h`` a
    :class:`~delaysmp.absde_backward.Terminal`.  ``v`` is the control on
    ``[-delta, 0)`` (array ``(n_delay, m)``, callable or ``None`` for zero).
    """

    triple: object
    noise: object
    grid: object
    bundle: object
    f: object
    h: object
    m: object
    nu: object = None
    x0: object = 0.0
    v: object = None
    U: AdmissibleSet = None
    convex: bool = None

    def __post_init__(self):
        if self.U is None:
            self.U = AdmissibleSet("whole", m=self.bundle.m)
        if self.m.lag_weights(self.grid.dt).size - 1 > self.grid.n_delay:
            raise PreconditionError("delay measure support exceeds the grid delay")
        if self.nu is not None and self.nu.lag_weights(self.grid.dt).size - 1 > self.grid.n_delay:
            raise PreconditionError("terminal measure support exceeds the grid delay")
        if np.ndim(self.x0) == 0:
            self.x0 = np.full(self.triple.n, float(self.x0))

    @property
    def n_controls(self):
        return self.bundle.m

    @property
    def free(self):
        """Slice of control nodes that influence the cost."""
        return slice(self.grid.i0, self.grid.iT)

    def initial_control(self):
        g = self.grid
        if self.v is None:
            return np.zeros((g.i0, self.n_controls))
        if callable(self.v):
            return np.array([np.asarray(self.v(t), float).reshape(self.n_controls) for t in g.times[:g.i0]])
        return np.asarray(self.v, float).reshape(g.i0, self.n_controls)

    def control(self, values=None):
        """Full control from free-node values ``(n_T, m)`` or a callable of ``t``."""
        g = self.grid
        u = np.zeros((g.iT + 1, self.n_controls))
        u[:g.i0] = self.initial_control()
        if values is None:
            return u
        if callable(values):
            u[g.i0:] = [np.asarray(values(t), float).reshape(self.n_controls) for t in g.times[g.i0:g.iT + 1]]
        else:
            vals = np.asarray(values, float)
            u[g.i0:g.i0 + vals.shape[0]] = vals
            if vals.shape[0] == g.n_T:
                u[g.iT] = vals[-1]
        return u

    def l2_norm(self, u):
        return float(np.sqrt(self.grid.dt * np.sum(np.asarray(u)[self.free] ** 2)))

    def l2_distance(self, u, w):
        return self.l2_norm(np.asarray(u) - np.asarray(w))

    def increments(self, n_traj, seed):
        return sample_increments(self.noise, self.grid, n_traj, seed)


@dataclass
class Solution:
    u: np.ndarray
    x: object
    utility: object
    J: float
    k: np.ndarray = None
    adjoint: BackwardPair = None
    G: np.ndarray = None
    G_se: np.ndarray = None
    G_paths: np.ndarray = None
    extra: dict = field(default_factory=dict)


def _node_args(problem, x, U, i):
    """Forward arguments ``(t, x, x_d, u, u_d)`` at node ``i``."""
    W = problem.m.lag_weights(problem.grid.dt)
    xd = lagged_sum(x.x, W, [i], -1)[0]
    ud = lagged_sum(U, W, [i], -1)[0]
    return problem.grid.time(i), x.x[i], xd, U[i], ud


def _traj_controls(u, P):
    u = np.asarray(u, float)
    return u if u.ndim == 3 else np.broadcast_to(u[:, None, :], (u.shape[0], P, u.shape[1]))


def features_for(problem, x, U):
    """Regression features ``(x, x_d, u)`` at a node."""
    def feats(i):
        if i > problem.grid.iT:
            i = problem.grid.iT
        _, xi, xd, ui, _ = _node_args(problem, x, U, i)
        return np.concatenate([xi, xd, ui], axis=1)
    return feats


def evaluate(problem, u, dw, estimator=None, workers=1):
    """Forward state and utility for control ``u``; returns a :class:`Solution`."""
    estimator = estimator or CondEstimator()
    u = control_nodes(u, problem.grid, problem.n_controls)
    x = solve_sdee(problem.bundle, problem.triple, problem.x0, u, problem.m, problem.grid,
                   problem.noise, dw=dw, workers=workers)
    U = _traj_controls(u, x.n_traj)
    feats = None if estimator.mode == "exact-linear" else features_for(problem, x, U)
    ypair, J = solve_recursive_utility(problem.f, problem.h, x, u, problem.m, problem.nu,
                                       problem.grid, problem.noise, estimator, feats)
    return Solution(u=u, x=x, utility=ypair, J=J, extra={"features": feats})


def J_of(problem, u, dw, estimator=None, workers=1):
    return evaluate(problem, u, dw, estimator, workers).J


def _gen_args(problem, sol, U, i):
    t, xi, xd, ui, ud = _node_args(problem, sol.x, U, i)
    Y, Ya, z, za = sol.utility.generator_args(i)
    return (t, xi, xd, Y, Ya, z, za, ui, ud)


def solve_k(problem, sol):
    """Weight process ``k`` on the nodes of ``[-delta, T]``, shape ``(iT + 1, P)``."""
    g = problem.grid
    P, modes, f = sol.x.n_traj, problem.noise.modes, problem.f
    U = _traj_controls(sol.u, P)
    inv_lam = problem.noise.inverse_eigenvalues()
    a = np.zeros((g.n_T + 1, P))
    a_d = np.zeros((g.n_T + 1, P))
    c = np.zeros((g.n_T + 1, P, modes))
    c_d = np.zeros((g.n_T + 1, P, modes))
    if any(getattr(f, nm) is not None for nm in ("f_y", "f_ya", "f_z", "f_za")):
        for s in range(g.n_T):
            args = _gen_args(problem, sol, U, g.i0 + s)
            a[s] = f.derivative("f_y", (), *args)
            a_d[s] = f.derivative("f_ya", (), *args)
            c[s] = f.derivative("f_z", (modes,), *args) * inv_lam
            c_d[s] = f.derivative("f_za", (modes,), *args) * inv_lam
    k = solve_linear_sdde_scalar(a, a_d, c, c_d, problem.m, g, sol.x.dw, init=-1.0)
    sol.k = k
    return k


def hamiltonian(problem, t, x, xd, y, ya, z, za, u, ud, p, q, k):
    """``H = <b, p>_H + <sigma, q>_{L2^0} - f k`` for batched arguments.

    ``b`` and ``sigma`` are the bundle nonlinearities; the operator parts
    ``A x`` and ``B x`` act on the adjoint through ``M`` and ``N``.
    """
    tri, lam = problem.triple, problem.noise.eigenvalues
    b = problem.bundle.drift(t, x, xd, u, ud)
    s = problem.bundle.noise(t, x, xd, u, ud)
    f = problem.f.value(t, x, xd, y, ya, z, za, u, ud)
    return (tri.h_inner(b, p) + np.einsum("pik,ij,pjk,k->p", s, tri.M_H, q, lam)
            - f * np.asarray(k, float))


def hamiltonian_partials(problem, t, x, xd, y, ya, z, za, u, ud, p, q, k):
    """Partials of :func:`hamiltonian` (coefficient vectors, batched)."""
    tri, lam, f = problem.triple, problem.noise.eigenvalues, problem.f
    n, m, modes = tri.n, problem.n_controls, problem.noise.modes
    d = problem.bundle.derivatives(t, x, xd, u, ud)
    args = (t, x, xd, y, ya, z, za, u, ud)
    Mp = p @ tri.M_H
    Mq = np.einsum("ij,pjk->pik", tri.M_H, q) * lam
    k = np.asarray(k, float)
    out = {}
    for key, bname, sname, fname, dim in (("H_x", "b_x", "sigma_x", "f_x", n),
                                          ("H_xd", "b_xd", "sigma_xd", "f_xd", n),
                                          ("H_u", "b_u", "sigma_u", "f_u", m),
                                          ("H_ud", "b_ud", "sigma_ud", "f_ud", m)):
        out[key] = (np.einsum("pia,pi->pa", d[bname], Mp) + np.einsum("pika,pik->pa", d[sname], Mq)
                    - k[:, None] * f.derivative(fname, (dim,), *args))
    for key, fname, shape in (("H_y", "f_y", ()), ("H_ya", "f_ya", ()),
                              ("H_z", "f_z", (modes,)), ("H_za", "f_za", (modes,))):
        fk = f.derivative(fname, shape, *args)
        out[key] = -(k.reshape((-1,) + (1,) * len(shape)) * fk)
    return out


class _AdjointGenerator:
    """``H_x(l) + sum_j W_j H_xd(l + j)``, caching ``H_xd`` by node."""

    def __init__(self, problem, sol):
        self.problem, self.sol = problem, sol
        self.U = _traj_controls(sol.u, sol.x.n_traj)
        self.W = problem.m.lag_weights(problem.grid.dt)
        self.cache = {}

    def partials(self, l, p, q):
        args = _gen_args(self.problem, self.sol, self.U, l)
        return hamiltonian_partials(self.problem, *args, p, q, self.sol.k[l])

    def __call__(self, l, p, q, p_a, q_a):
        iT = self.problem.grid.iT
        if l >= iT:
            self.cache[l] = None
            return np.zeros_like(p)
        H = self.partials(l, p, q)
        self.cache[l] = H["H_xd"]
        out = H["H_x"].copy()
        for j, w in enumerate(self.W):
            if w != 0.0 and l + j < iT:
                out += w * self.cache[l + j]
        return out


def assemble_adjoint(problem, sol, estimator=None):
    """Adjoint pair ``(p, q)`` for a solved forward/utility/k state."""
    estimator = estimator or CondEstimator()
    g, tri, noise = problem.grid, problem.triple, problem.noise
    if sol.k is None:
        solve_k(problem, sol)
    xT = sol.x.x[g.iT]
    xnu = terminal_delay(sol.x, problem.nu, g)
    kT = sol.k[g.iT]
    xi = -kT[:, None] * tri.lift(problem.h.grad("h_x", xT, xnu))
    run = -kT[:, None] * tri.lift(problem.h.grad("h_xnu", xT, xnu))
    feats = sol.extra.get("features")
    masses = np.zeros(g.n_T)
    if problem.nu is not None:
        V = problem.nu.lag_weights(g.dt)
        for j, w in enumerate(V):
            node = g.iT - j
            if w != 0.0 and node > g.i0:
                masses[node - 1 - g.i0] += w
    zeta_cache = {}

    def zeta(node):
        if node not in zeta_cache:
            proj = estimator.fit(None if feats is None else feats(node))
            zeta_cache[node] = proj(run)
        return zeta_cache[node]

    terminal = RunningTerminal(xi, zeta, masses)
    B = problem.bundle.B
    lam = noise.eigenvalues
    if B is None:
        N = None
    elif callable(B):
        def N(l, q):
            Bt = problem.bundle.B_at(g.time(l))
            return np.einsum("k,kji,jl,plk->pi", lam, Bt, tri.M_H, q)
    else:
        N = np.einsum("k,kji,jl->kil", lam, np.asarray(B, float), tri.M_H)
    A = problem.bundle.A
    M = (lambda i: problem.bundle.A_at(g.time(i)).T) if callable(A) else np.asarray(A, float).T
    gen = _AdjointGenerator(problem, sol)
    pair = solve_absee(M, N, gen, terminal, problem.m, g, noise, sol.x.dw, tri, estimator, feats)
    pair.diagnostics["running_mass"] = float(masses.sum())
    sol.adjoint = pair
    sol.extra["adjoint_generator"] = gen
    return pair


def gradient(problem, sol, estimator=None):
    """Maximum-principle gradient on the control nodes, shape ``(iT + 1, m)``.

    For open-loop controls the node values are trajectory means and
    ``sol.G_se`` holds their Monte Carlo standard errors.
    """
    estimator = estimator or CondEstimator()
    g = problem.grid
    if sol.adjoint is None:
        assemble_adjoint(problem, sol, estimator)
    P, m = sol.x.n_traj, problem.n_controls
    U = _traj_controls(sol.u, P)
    W = problem.m.lag_weights(g.dt)
    Hu = np.zeros((g.iT + 1, P, m))
    Hud = np.zeros((g.n_nodes, P, m))
    p, q = sol.adjoint.p, sol.adjoint.q
    for i in range(g.i0, g.iT):
        args = _gen_args(problem, sol, U, i)
        H = hamiltonian_partials(problem, *args, p[i], q[i], sol.k[i])
        Hu[i], Hud[i] = H["H_u"], H["H_ud"]
    Gp = Hu.copy()
    nodes = np.arange(g.i0, g.iT)
    Gp[nodes] += lagged_sum(Hud, W, nodes, +1)
    feats = sol.extra.get("features")
    if np.asarray(sol.u).ndim == 3 and estimator.mode != "exact-linear":
        for i in nodes:
            Gp[i] = estimator.fit(feats(i))(Gp[i])
    Gp[:g.i0] = 0.0
    sol.G_paths = Gp
    sol.G = Gp.mean(axis=1)
    sol.G_se = Gp.std(axis=1, ddof=1) / np.sqrt(P) if P > 1 else np.zeros_like(sol.G)
    return sol.G


def solve_all(problem, u, dw, estimator=None, workers=1):
    """Forward, utility, ``k``, adjoint and gradient for one control."""
    sol = evaluate(problem, u, dw, estimator, workers)
    solve_k(problem, sol)
    assemble_adjoint(problem, sol, estimator)
    gradient(problem, sol, estimator)
    return sol


def directional_derivative(problem, G, v):
    """``int_0^T <G, v> dt`` with the left-node rule used by the cost."""
    return float(problem.grid.dt * np.sum(np.asarray(G)[problem.free] * np.asarray(v)[problem.free]))


def gateaux_check(problem, u, v, rhos=(1e-1, 1e-2, 1e-3), n_traj=1, seed=0, dw=None,
                  estimator=None, tol=1e-2):
    """Difference quotients of ``J`` versus the gradient prediction.

    Common random numbers are used for every evaluation.  The returned dict
    holds the quotients with their errors against the prediction, plus the
    verdicts ``decreasing`` and ``passes`` (smallest-``rho`` relative error
    at most ``tol``).
    """
    estimator = estimator or CondEstimator()
    u = control_nodes(u, problem.grid, problem.n_controls)
    v = np.asarray(v, float)
    v = np.broadcast_to(v, u.shape).copy() if v.shape != u.shape else v.copy()
    v[:problem.grid.i0] = 0.0
    if dw is None:
        dw = problem.increments(n_traj, seed)
    for r in rhos:
        if not problem.U.contains(u + r * v):
            raise PreconditionError(f"u + {r} v leaves the admissible set")
    base = solve_all(problem, u, dw, estimator)
    pred = directional_derivative(problem, base.G, v)
    quotients = [(J_of(problem, u + r * v, dw, estimator) - base.J) / r for r in rhos]
    errors = [abs(d - pred) for d in quotients]
    scale = max(abs(pred), 1e-300)
    rel = [e / scale for e in errors]
    if len(rhos) >= 2:
        r1, r2 = rhos[-2], rhos[-1]
        d1, d2 = quotients[-2], quotients[-1]
        extrap = (r1 * d2 - r2 * d1) / (r1 - r2)
    else:
        extrap = quotients[-1]
    zero = pred == 0.0 and all(q == 0.0 for q in quotients)
    decreasing = zero or all(b < a for a, b in zip(errors, errors[1:]))
    return {"rhos": list(map(float, rhos)), "quotients": quotients, "predicted": pred,
            "errors": errors, "relative_errors": rel, "extrapolated": float(extrap),
            "extrapolated_error": abs(extrap - pred), "J": base.J,
            "decreasing": bool(decreasing), "passes": bool(zero or (decreasing and rel[-1] <= tol))}


def vi_residual(problem, u, G, n_samples=200, seed=0):
    """Variational-inequality residual ``-min_w int <G, w - u> dt``.

    ``w`` runs over ``n_samples`` random admissible controls together with
    the analytic minimiser of the linear form (box and ball sets); for the
    whole space the residual is ``||G||_{L2}``.
    """
    G = np.asarray(G)
    if problem.U.kind == "whole":
        return problem.l2_norm(G)
    rng = np.random.default_rng(seed)
    fr = problem.free
    u_f, G_f = np.asarray(u)[fr], G[fr]
    n_free = u_f.shape[0]
    vals = [problem.grid.dt * np.sum(G_f * (problem.U.sample(rng, (n_free,)) - u_f)) for _ in range(n_samples)]
    w_star = problem.U.linear_minimizer(G_f, u_f)
    vals.append(problem.grid.dt * np.sum(G_f * (w_star - u_f)))
    return float(max(0.0, -min(vals)))


@dataclass
class OptimizeResult:
    u: np.ndarray
    J: float
    converged: bool
    history: list
    residual: float
    grad_norm: float
    message: str = ""


def optimize(problem, u0=None, tol=1e-6, max_iter=100, n_traj=1, seed=0, dw=None, estimator=None,
             gamma0=1.0, shrink=0.5, slope=1e-4, max_backtracks=60, n_residual=200, workers=1,
             callback=None):
    """Projected gradient descent with Armijo backtracking on frozen noise.

    Iterates ``u <- Proj_U(u - gamma G)`` and stops when the
    variational-inequality residual (``||G||_{L2}`` for the whole space) is
    at most ``tol``.
    """
    estimator = estimator or CondEstimator()
    u = problem.control(None) if u0 is None else control_nodes(u0, problem.grid, problem.n_controls).copy()
    u[problem.free] = problem.U.project(u[problem.free])
    if dw is None:
        dw = problem.increments(n_traj, seed)
    sol = solve_all(problem, u, dw, estimator, workers)
    history = []
    best = (sol.J, u.copy())
    msg = ""
    for it in range(max_iter + 1):
        G = sol.G
        gnorm = problem.l2_norm(G)
        res = vi_residual(problem, u, G, n_residual, seed + it)
        rec = {"iter": it, "J": sol.J, "grad_norm": gnorm, "residual": res, "step": None}
        history.append(rec)
        if callback is not None:
            callback(rec)
        if sol.J < best[0]:
            best = (sol.J, u.copy())
        if res <= tol:
            return OptimizeResult(u, sol.J, True, history, res, gnorm, "converged")
        if it == max_iter:
            msg = "maximum number of iterations reached"
            break
        gamma = gamma0
        accepted = False
        for _ in range(max_backtracks):
            cand = u.copy()
            cand[problem.free] = problem.U.project(u[problem.free] - gamma * G[problem.free])
            lin = directional_derivative(problem, G, cand - u)
            new = solve_all(problem, cand, dw, estimator, workers)
            if new.J <= sol.J + slope * lin:
                accepted = True
                break
            gamma *= shrink
        if not accepted:
            msg = "step size underflow"
            break
        rec["step"] = gamma
        u, sol = cand, new
    J_best, u_best = best
    bsol = solve_all(problem, u_best, dw, estimator, workers)
    return OptimizeResult(u_best, J_best, False, history, vi_residual(problem, u_best, bsol.G, n_residual, seed),
                          problem.l2_norm(bsol.G), msg)


def convexity_probe(problem, sol, n_samples=50, seed=0, scale=0.5):
    """Sampled second differences of ``h`` and of ``H`` in its state/control arguments."""
    rng = np.random.default_rng(seed)
    g = problem.grid
    P = sol.x.n_traj
    U = _traj_controls(sol.u, P)
    worst_h, worst_H = 0.0, 0.0
    xT = sol.x.x[g.iT]
    xnu = terminal_delay(sol.x, problem.nu, g)
    for _ in range(n_samples):
        dx = scale * rng.standard_normal(xT.shape)
        dn = scale * rng.standard_normal(xT.shape)
        second = (problem.h.value(xT + dx, xnu + dn) + problem.h.value(xT - dx, xnu - dn)
                  - 2 * problem.h.value(xT, xnu))
        worst_h = min(worst_h, float(second.min()))
        i = int(rng.integers(g.i0, g.iT))
        args = list(_gen_args(problem, sol, U, i))
        mult = (sol.adjoint.p[i], sol.adjoint.q[i], sol.k[i])
        base = hamiltonian(problem, *args, *mult)
        dirs = [scale * rng.standard_normal(np.shape(a)) if j > 0 else 0.0 for j, a in enumerate(args)]
        plus = [a + d for a, d in zip(args, dirs)]
        minus = [a - d for a, d in zip(args, dirs)]
        plus[0] = minus[0] = args[0]
        second = hamiltonian(problem, *plus, *mult) + hamiltonian(problem, *minus, *mult) - 2 * base
        worst_H = min(worst_H, float(second.min()))
    tol = 1e-9
    return {"h_min_second_difference": worst_h, "H_min_second_difference": worst_H,
            "convex": bool(worst_h >= -tol and worst_H >= -tol)}


def random_candidates(problem, ubar, n, rng, amplitude=None):
    """Random admissible controls around ``ubar`` (smooth bumps of varying size)."""
    g = problem.grid
    t = g.times[g.i0:g.iT + 1]
    base = max(problem.l2_norm(ubar) / np.sqrt(g.T), 1.0) if amplitude is None else amplitude
    out = []
    for c in range(n):
        amp = base * 10.0 ** rng.uniform(-2, 0.5)
        w = np.zeros((t.size, problem.n_controls))
        for _ in range(3):
            freq = rng.integers(1, 5)
            phase = rng.uniform(0, 2 * np.pi)
            w += rng.standard_normal(problem.n_controls) * np.sin(np.pi * freq * t / g.T + phase)[:, None]
        cand = np.asarray(ubar, float).copy()
        cand[g.i0:] = problem.U.project(cand[g.i0:] + amp * w)
        out.append(cand)
    return out


def sufficiency_check(problem, ubar, n_candidates=100, n_traj=1, seed=0, dw=None, estimator=None,
                      candidates=None, check_convexity=True):
    """Compare ``J(ubar)`` with ``J`` at random admissible controls on the same noise.

    Passes when ``J(ubar) <= J(u) + 3 * SE`` for every candidate, ``SE``
    being the paired standard error of ``y(0)`` differences.
    """
    estimator = estimator or CondEstimator()
    if dw is None:
        dw = problem.increments(n_traj, seed)
    ubar = control_nodes(ubar, problem.grid, problem.n_controls)
    base = solve_all(problem, ubar, dw, estimator)
    probe = None
    if check_convexity:
        probe = convexity_probe(problem, base, seed=seed)
        if problem.convex is False or not probe["convex"]:
            raise PreconditionError(f"convexity probe failed: {probe}")
    rng = np.random.default_rng(seed + 1)
    if candidates is None:
        candidates = random_candidates(problem, ubar, n_candidates, rng)
    y0 = base.utility.y[problem.grid.i0]
    gaps, worst = [], np.inf
    violations = 0
    P = dw.shape[1]
    for cand in candidates:
        s = evaluate(problem, cand, dw, estimator)
        d = s.utility.y[problem.grid.i0] - y0
        se = float(d.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
        gap = s.J - base.J
        tol = 3 * se + 1e-12 * max(1.0, abs(base.J))
        gaps.append(gap)
        worst = min(worst, gap + tol)
        if gap + tol < 0:
            violations += 1
    return {"J": base.J, "n_candidates": len(candidates), "violations": violations,
            "min_gap": float(min(gaps)) if gaps else 0.0, "worst_margin": float(worst),
            "passes": violations == 0, "convexity": probe}
