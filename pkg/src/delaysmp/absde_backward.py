"""Backward solvers: anticipated backward equations with a running terminal,
and the scalar recursive utility.

General equation (H-valued ``p``, Hilbert-Schmidt ``q``)::

    p(t) = xi + int_(t,T] zeta dF + int_t^T [M p + N q + E_t g(s, p, q, p_a, q_a)] ds
           - int_t^T q dw,          p = q = 0 on (T, T + delta],

where ``p_a(s) = int p(s - r) m(dr)`` is the anticipated average.  With the
one-step bracket

    rho_i = p_{i+1} + dt R(N q_{i+1} + g_{i+1}) + zeta_{i+1} F((t_i, t_{i+1}])

the sweep is

    q_i^k = S_i E_i[rho_i dw_i^k] / (lam_k dt),    p_i = S_i E_i[rho_i],
    S_i = (I - dt R(M_i))^{-1},

with ``R`` the lift ``M_H^{-1}``.  The generator is read at the right end of
each step, where every argument, including the anticipated ones, is
already known.  Paired with the forward scheme of :mod:`sdee_forward`,
this sweep is the exact discrete adjoint (see :mod:`smp_optimizer`).

The utility sweep uses the form of the cost itself::

    z_i = E_i[y_{i+1} dw_i] / (lam dt),
    y_i = E_i[y_{i+1} + dt f(t_i, x_i, x_d, y_{i+1}, y_a, z_i, z_a, u_i, u_d)],

where ``y_a`` at node ``i`` averages ``y`` over the nodes ``i + 1 + j`` and
``z_a`` over ``i + j``.

Arrays use global node indices of the :class:`TimeGrid`; ``p`` has shape
``(n_nodes, P, n)`` and ``q`` has shape ``(n_nodes, P, n, modes)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .delay_measures import lagged_sum
from .errors import NumericalAbort, PreconditionError
from .hilbert_core import hs_norm


class CondEstimator:
    """Conditional expectation ``E[. | F_{t_i}]`` on a time slice.

    Modes
    -----
    ``"exact-linear"``
        The pathwise value is kept.  For backward equations that are affine
        in the unknowns with adapted coefficients this leaves every
        expectation of the form ``E[c_i * Y_i]`` (``c_i`` adapted) exact,
        which is all that open-loop gradients need.  In deterministic problems it is the identity, as it should be.
    ``"regression"``
        Least squares on a polynomial basis of the time-``t_i`` features
        (degree ``degree``, ridge ``ridge``), in the spirit of
        Longstaff-Schwartz.
    """

    def __init__(self, mode="exact-linear", degree=2, ridge=1e-8):
        if mode not in ("exact-linear", "regression"):
            raise PreconditionError(f"unknown estimator mode {mode!r}")
        self.mode = mode
        self.degree = int(degree)
        self.ridge = float(ridge)
        self.log = []

    def basis(self, features):
        z = np.asarray(features, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        sd = z.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(z).max(axis=0))
        z = (z[:, keep] - z[:, keep].mean(axis=0)) / sd[keep]
        cols = [np.ones(z.shape[0])]
        if self.degree >= 1:
            cols += [z[:, a] for a in range(z.shape[1])]
        if self.degree >= 2:
            cols += [z[:, a] * z[:, b] for a in range(z.shape[1]) for b in range(a, z.shape[1])]
        return np.column_stack(cols)

    def fit(self, features):
        """Return the projection operator for one slice (a callable)."""
        if self.mode == "exact-linear" or features is None:
            return lambda y: y
        Phi = self.basis(features)
        P, nb = Phi.shape
        G = Phi.T @ Phi / P
        G[np.diag_indices(nb)] += self.ridge
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise NumericalAbort("regression design is rank deficient", {"basis": nb}) from exc
        cond = float(np.linalg.cond(G))
        self.log.append(cond)

        def project(y):
            y = np.asarray(y, dtype=float)
            flat = y.reshape(P, -1)
            coef = np.linalg.solve(L.T, np.linalg.solve(L, Phi.T @ flat / P))
            return (Phi @ coef).reshape(y.shape)

        return project

    def diagnostics(self):
        if not self.log:
            return {"mode": self.mode}
        return {"mode": self.mode, "degree": self.degree, "ridge": self.ridge,
                "max_condition": float(max(self.log)), "n_fits": len(self.log)}


@dataclass
class RunningTerminal:
    """Terminal datum ``xi`` at ``T`` and running datum ``zeta`` against ``F``.

    ``xi`` is ``(P, n)``; ``zeta`` is an array ``(n_nodes, P, n)`` or a
    callable of the global node index; ``F`` is a
    :class:`~delaysmp.hilbert_core.FiniteVariationIntegrator`, or directly an
    array of step masses ``F((t_i, t_{i+1}])`` of length ``n_T``.
    """

    xi: np.ndarray
    zeta: object = None
    F: object = None

    def zeta_at(self, node, shape):
        if self.zeta is None:
            return np.zeros(shape)
        z = self.zeta(node) if callable(self.zeta) else self.zeta[node]
        return np.broadcast_to(np.asarray(z, dtype=float), shape)

    def step_masses(self, grid):
        if self.F is None:
            return np.zeros(grid.n_T)
        if hasattr(self.F, "step_masses"):
            return self.F.step_masses(grid)
        F = np.asarray(self.F, dtype=float)
        if F.shape != (grid.n_T,):
            raise PreconditionError("step masses must have length n_T")
        return F


@dataclass
class BackwardPair:
    p: np.ndarray
    q: np.ndarray
    grid: object
    diagnostics: dict = field(default_factory=dict)

    def to_csv(self, path):
        g = self.grid
        n, k = self.p.shape[2], self.q.shape[3]
        head = [f"p_{i + 1}" for i in range(n)] + [f"q_{i + 1}_{j + 1}" for i in range(n) for j in range(k)]
        with open(path, "w") as fh:
            fh.write("traj,t," + ",".join(head) + "\n")
            for p in range(self.p.shape[1]):
                for i in range(g.i0, g.n_nodes):
                    vals = np.concatenate([self.p[i, p], self.q[i, p].ravel()])
                    fh.write(f"{p},{g.time(i):.17g}," + ",".join(f"{v:.17g}" for v in vals) + "\n")


def _features_at(features, node):
    if features is None:
        return None
    return features(node) if callable(features) else features[node]


def _op_at(op, node):
    return op(node) if callable(op) else op


def solve_absee(M, N, g, terminal, m, grid, noise, dw, triple, estimator=None, features=None):
    """Backward sweep for the anticipated equation with a running terminal.

    Parameters
    ----------
    M : ``(n, n)`` array or callable of the node index
        V*-valued coefficient of ``p``; the solve at step ``i`` uses node ``i``.
    N : ``(modes, n, n)`` array, callable ``(node, q) -> (P, n)`` or None
        ``N q = sum_k N[k] @ q e_k``.
    g : callable ``(node, p, q, p_a, q_a) -> (P, n)`` or None
        V*-valued generator; ``p_a``, ``q_a`` are the anticipated averages
        at that node.
    terminal : RunningTerminal
    dw : ``(n_T, P, modes)`` increments, shared with the forward run.
    features : callable or array giving ``(P, d)`` regressors per node.
    """
    estimator = estimator or CondEstimator()
    P, modes, n = dw.shape[1], noise.modes, triple.n
    xi = np.broadcast_to(np.asarray(terminal.xi, dtype=float), (P, n))
    W = m.lag_weights(grid.dt)
    if len(W) - 1 > grid.n_delay:
        raise PreconditionError("measure support exceeds the grid delay")
    dF = terminal.step_masses(grid)
    inv_lam = noise.inverse_eigenvalues()
    p = np.zeros((grid.n_nodes, P, n))
    q = np.zeros((grid.n_nodes, P, n, modes))
    p[grid.iT] = xi
    R = triple.lift_matrix
    const_M = not callable(M)
    if const_M:
        Sinv = np.linalg.inv(np.eye(n) - grid.dt * R @ np.asarray(M, float))
    for i in range(grid.iT - 1, grid.i0 - 1, -1):
        l = i + 1
        rho = p[l].copy()
        v = np.zeros((P, n))
        if N is not None:
            if callable(N):
                v += N(l, q[l])
            else:
                v += np.einsum("kij,pjk->pi", np.asarray(N, float), q[l])
        if g is not None:
            p_a = lagged_sum(p, W, [l], +1)[0]
            q_a = lagged_sum(q, W, [l], +1)[0]
            v += g(l, p[l], q[l], p_a, q_a)
        if np.any(v):
            rho += grid.dt * v @ R.T
        step = dF[i - grid.i0]
        if step != 0.0:
            rho += step * terminal.zeta_at(l, (P, n))
        S = Sinv if const_M else np.linalg.inv(np.eye(n) - grid.dt * R @ np.asarray(M(i), float))
        proj = estimator.fit(_features_at(features, i))
        corr = rho[:, :, None] * dw[i - grid.i0][:, None, :]
        q[i] = np.einsum("ij,pjk->pik", S, proj(corr)) * (inv_lam / grid.dt)
        p[i] = proj(rho) @ S.T
        if not (np.all(np.isfinite(p[i])) and np.all(np.isfinite(q[i]))):
            raise NumericalAbort("backward sweep produced non-finite values", {"node": i})
    return BackwardPair(p, q, grid, {"estimator": estimator.diagnostics()})


@dataclass
class Generator:
    """Recursive-utility generator with registered derivatives.

    ``f(t, x, xd, y, ya, z, za, u, ud) -> (P,)`` where ``y``, ``ya`` are
    ``(P,)``, ``z``, ``za`` are ``(P, modes)`` mode coordinates and the rest
    as in :class:`~delaysmp.sdee_forward.CoefficientBundle`.  Derivatives are
    plain partials: ``f_x, f_xd -> (P, n)``, ``f_y, f_ya -> (P,)``,
    ``f_z, f_za -> (P, modes)``, ``f_u, f_ud -> (P, m)``.  ``None`` means zero.
    """

    f: object = None
    f_x: object = None
    f_xd: object = None
    f_y: object = None
    f_ya: object = None
    f_z: object = None
    f_za: object = None
    f_u: object = None
    f_ud: object = None

    NAMES = ("f_x", "f_xd", "f_y", "f_ya", "f_z", "f_za", "f_u", "f_ud")

    def value(self, *args):
        P = args[1].shape[0]
        if self.f is None:
            return np.zeros(P)
        return np.broadcast_to(np.asarray(self.f(*args), dtype=float), (P,))

    def derivative(self, name, shape, *args):
        fn = getattr(self, name)
        P = args[1].shape[0]
        if fn is None:
            return np.zeros((P,) + shape)
        return np.broadcast_to(np.asarray(fn(*args), dtype=float), (P,) + shape)

    def is_linear_in_utility(self):
        """True when ``f_y, f_ya, f_z, f_za`` are registered as constants."""
        return all(getattr(self, nm) is None or getattr(getattr(self, nm), "constant", False)
                   for nm in ("f_y", "f_ya", "f_z", "f_za"))


@dataclass
class Terminal:
    """Terminal map ``h(x(T), x_nu(T))`` with ``h_x`` and ``h_xnu``."""

    h: object = None
    h_x: object = None
    h_xnu: object = None

    def value(self, x, xnu):
        if self.h is None:
            return np.zeros(x.shape[0])
        return np.broadcast_to(np.asarray(self.h(x, xnu), dtype=float), (x.shape[0],))

    def grad(self, name, x, xnu):
        fn = getattr(self, name)
        if fn is None:
            return np.zeros_like(x)
        return np.broadcast_to(np.asarray(fn(x, xnu), dtype=float), x.shape)


def constant(value):
    """Mark a derivative callable as constant (used for linearity checks)."""
    def fn(*args):
        return value
    fn.constant = True
    return fn


@dataclass
class UtilityPair:
    y: np.ndarray
    z: np.ndarray
    J: float
    spread: float
    grid: object
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def generator_args(self, node):
        """``(Y, Y_a, z, z_a)`` seen by the generator at ``node``."""
        Y = self.y[node + 1]
        Ya = lagged_sum(self.y, self.weights, [node + 1], +1)[0]
        za = lagged_sum(self.z, self.weights, [node], +1)[0]
        return Y, Ya, self.z[node], za


def terminal_delay(x, nu, grid):
    """``x_nu(T) = int x(T + s) nu(ds)`` from a forward ensemble, ``(P, n)``."""
    if nu is None:
        return np.zeros_like(x.x[grid.iT])
    V = nu.lag_weights(grid.dt)
    return lagged_sum(x.x, V, [grid.iT], -1)[0]


def solve_recursive_utility(f, h, x, u, m, nu, grid, noise, estimator=None, features=None):
    """Solve the utility equation backward and return ``(UtilityPair, J)``.

    ``x`` is a :class:`~delaysmp.sdee_forward.PathEnsemble` and ``u`` the
    control on the nodes of ``[-delta, T]`` (``(iT + 1, m)`` or
    ``(iT + 1, P, m)``).  ``J`` is the trajectory mean of ``y(0)``.
    """
    estimator = estimator or CondEstimator()
    P = x.n_traj
    W = m.lag_weights(grid.dt)
    X = x.x
    U = u if u.ndim == 3 else np.broadcast_to(u[:, None, :], (u.shape[0], P, u.shape[1]))
    inv_lam = noise.inverse_eigenvalues()
    y = np.zeros((grid.n_nodes, P))
    z = np.zeros((grid.n_nodes, P, noise.modes))
    y[grid.iT] = h.value(X[grid.iT], terminal_delay(x, nu, grid))
    pair = UtilityPair(y, z, 0.0, 0.0, grid, W)
    for i in range(grid.iT - 1, grid.i0 - 1, -1):
        proj = estimator.fit(_features_at(features, i))
        dwi = x.dw[i - grid.i0]
        z[i] = proj(y[i + 1][:, None] * dwi) * (inv_lam / grid.dt)
        Y, Ya, zi, za = pair.generator_args(i)
        xd = lagged_sum(X, W, [i], -1)[0]
        ud = lagged_sum(U, W, [i], -1)[0]
        fi = f.value(grid.time(i), X[i], xd, Y, Ya, zi, za, U[i], ud)
        y[i] = proj(y[i + 1] + grid.dt * fi)
        if not np.all(np.isfinite(y[i])):
            raise NumericalAbort("utility sweep produced non-finite values", {"node": i})
    y0 = y[grid.i0]
    pair.J = float(np.mean(y0))
    pair.spread = float(np.std(y0))
    pair.diagnostics = {"estimator": estimator.diagnostics(), "y0_spread": pair.spread}
    return pair, pair.J


def absee_stability_probe(M, N, g, terminal, direction, scales, m, grid, noise, dw, triple,
                          estimator=None, features=None):
    """Data-to-solution ratios for terminal perturbations ``terminal + eps * direction``.

    ``direction`` is a :class:`RunningTerminal` carrying the perturbation of
    ``xi`` and ``zeta``; ``F`` is taken from ``terminal``.  The ratio is
    ``E sup ||p - p'||_H^2 + E int ||q - q'||^2 dt`` over
    ``E ||xi - xi'||^2 + E int ||zeta - zeta'||^2 d|F|``.
    """
    base = solve_absee(M, N, g, terminal, m, grid, noise, dw, triple, estimator, features)
    masses = np.abs(terminal.step_masses(grid))
    P, n = dw.shape[1], triple.n
    ratios, nums = [], []
    for eps in scales:
        def zeta(node, eps=eps):
            return terminal.zeta_at(node, (P, n)) + eps * direction.zeta_at(node, (P, n))
        pert = RunningTerminal(np.asarray(terminal.xi) + eps * np.asarray(direction.xi), zeta, terminal.F)
        sol = solve_absee(M, N, g, pert, m, grid, noise, dw, triple, estimator, features)
        dp = sol.p - base.p
        dq = sol.q - base.q
        num = float(np.mean(triple.h_inner(dp, dp).max(axis=0))
                    + grid.dt * np.mean(np.sum(hs_norm(dq, noise, triple) ** 2, axis=0)))
        dxi = eps * np.broadcast_to(np.asarray(direction.xi, float), (P, n))
        den = float(np.mean(triple.h_inner(dxi, dxi)))
        for s, w in enumerate(masses):
            if w:
                dz = eps * direction.zeta_at(grid.i0 + s + 1, (P, n))
                den += w * float(np.mean(triple.h_inner(dz, dz)))
        nums.append(num)
        ratios.append(num / den if den > 0 else (0.0 if num == 0 else np.inf))
    r = np.asarray(ratios)
    spread = float(r.max() / r.min() - 1.0) if r.size and r.min() > 0 else 0.0
    return {"scales": list(map(float, scales)), "ratios": r.tolist(), "numerators": nums,
            "spread": spread, "finite": bool(np.all(np.isfinite(r)))}
