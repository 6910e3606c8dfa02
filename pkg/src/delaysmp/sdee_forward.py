"""Forward solver for delayed stochastic evolution equations.

The controlled state solves

    dx = [A x + b(t, x, x_d, u, u_d)] dt + [B x + sigma(t, x, x_d, u, u_d)] dw

with ``x = x0`` on ``[-delta, 0]`` and ``x_d``, ``u_d`` the moving averages
of the state and control under the delay measure.  One step of the scheme is

    (I - dt M_H^{-1} A(t_i)) x_{i+1} = x_i + dt b_i + (B x_i + sigma_i) dw_i

so only ``A`` is implicit; all delay terms read history that is already
known (the lag-zero weight reads ``x_i``).

Array layout: paths are time-major, ``(nodes, n_traj, dim)``, with node 0 at
``t = -delta``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .delay_measures import lagged_sum
from .errors import NumericalAbort, PreconditionError
from .hilbert_core import apply_B, sample_increments

BLOWUP = 1e12
BLOCK = 256


def _at(op, t):
    return op(t) if callable(op) else op


@dataclass
class CoefficientBundle:
    """Drift ``b`` and noise ``sigma`` with their registered first derivatives.

    All maps take batched arguments ``(t, x, x_d, u, u_d)`` with shapes
    ``(P, n), (P, n), (P, m), (P, m)``.  Values: ``b -> (P, n)``,
    ``sigma -> (P, n, modes)``.  Derivatives: ``b_x, b_xd -> (P, n, n)``,
    ``b_u, b_ud -> (P, n, m)``, ``sigma_x, sigma_xd -> (P, n, modes, n)``,
    ``sigma_u, sigma_ud -> (P, n, modes, m)``.  Any map left as ``None`` is
    identically zero.  ``A`` is ``(n, n)`` (V -> V* coefficients) and ``B``
    is ``(modes, n, n)``; either may be a function of ``t``.
    """

    n: int
    m: int
    modes: int
    A: object = None
    B: object = None
    b: object = None
    b_x: object = None
    b_xd: object = None
    b_u: object = None
    b_ud: object = None
    sigma: object = None
    sigma_x: object = None
    sigma_xd: object = None
    sigma_u: object = None
    sigma_ud: object = None
    check: bool = True
    derivative_error: float = field(default=0.0, init=False)

    def __post_init__(self):
        if self.A is None:
            self.A = np.zeros((self.n, self.n))
        if self.check:
            self.derivative_error = self.check_derivatives()

    # evaluation with zero defaults -------------------------------------
    def A_at(self, t):
        return np.asarray(_at(self.A, t), dtype=float)

    def B_at(self, t):
        return None if self.B is None else np.asarray(_at(self.B, t), dtype=float)

    def _eval(self, name, shape, t, x, xd, u, ud):
        fn = getattr(self, name)
        P = x.shape[0]
        if fn is None:
            return np.zeros((P,) + shape)
        return np.broadcast_to(np.asarray(fn(t, x, xd, u, ud), dtype=float), (P,) + shape)

    def drift(self, t, x, xd, u, ud):
        return self._eval("b", (self.n,), t, x, xd, u, ud)

    def noise(self, t, x, xd, u, ud):
        return self._eval("sigma", (self.n, self.modes), t, x, xd, u, ud)

    def derivatives(self, t, x, xd, u, ud):
        n, m, k = self.n, self.m, self.modes
        return {
            "b_x": self._eval("b_x", (n, n), t, x, xd, u, ud),
            "b_xd": self._eval("b_xd", (n, n), t, x, xd, u, ud),
            "b_u": self._eval("b_u", (n, m), t, x, xd, u, ud),
            "b_ud": self._eval("b_ud", (n, m), t, x, xd, u, ud),
            "sigma_x": self._eval("sigma_x", (n, k, n), t, x, xd, u, ud),
            "sigma_xd": self._eval("sigma_xd", (n, k, n), t, x, xd, u, ud),
            "sigma_u": self._eval("sigma_u", (n, k, m), t, x, xd, u, ud),
            "sigma_ud": self._eval("sigma_ud", (n, k, m), t, x, xd, u, ud),
        }

    # probes -------------------------------------------------------------
    def _random_args(self, rng, P):
        return (rng.uniform(0.0, 1.0), rng.standard_normal((P, self.n)), rng.standard_normal((P, self.n)),
                rng.standard_normal((P, self.m)), rng.standard_normal((P, self.m)))

    def check_derivatives(self, n_points=10, seed=12345, rel=1e-5):
        """Compare every registered derivative with central differences.

        Returns the worst relative mismatch; raises when it exceeds ``rel``.
        """
        rng = np.random.default_rng(seed)
        worst = 0.0
        pairs = [("b", "b_x", 1), ("b", "b_xd", 2), ("b", "b_u", 3), ("b", "b_ud", 4),
                 ("sigma", "sigma_x", 1), ("sigma", "sigma_xd", 2), ("sigma", "sigma_u", 3),
                 ("sigma", "sigma_ud", 4)]
        for _ in range(n_points):
            args = list(self._random_args(rng, 1))
            for value, deriv, slot in pairs:
                if getattr(self, value) is None and getattr(self, deriv) is None:
                    continue
                shape = (self.n,) if value == "b" else (self.n, self.modes)
                d = self._eval(deriv, shape + (args[slot].shape[1],), *args)[0]
                z = args[slot]
                fd = np.empty_like(d)
                for c in range(z.shape[1]):
                    h = 1e-6 * max(1.0, abs(z[0, c]))
                    zp, zm = z.copy(), z.copy()
                    zp[0, c] += h
                    zm[0, c] -= h
                    ap, am = list(args), list(args)
                    ap[slot], am[slot] = zp, zm
                    fd[..., c] = (self._eval(value, shape, *ap)[0] - self._eval(value, shape, *am)[0]) / (2 * h)
                err = float(np.abs(fd - d).max(initial=0.0) / max(1.0, np.abs(d).max(initial=0.0)))
                worst = max(worst, err)
                if err > rel:
                    raise PreconditionError(
                        f"registered derivative {deriv} disagrees with finite differences (rel err {err:.3g})")
        return worst

    def lipschitz_probe(self, n_samples=200, seed=7):
        """Largest sampled difference quotient of ``b`` and ``sigma``."""
        rng = np.random.default_rng(seed)
        Lb = Ls = 0.0
        for _ in range(n_samples):
            t, *a = self._random_args(rng, 1)
            _, *c = self._random_args(rng, 1)
            c = [ai + 0.1 * ci for ai, ci in zip(a, c)]
            dist = np.sqrt(sum(float(np.sum((ai - ci) ** 2)) for ai, ci in zip(a, c)))
            Lb = max(Lb, float(np.linalg.norm(self.drift(t, *a) - self.drift(t, *c))) / dist)
            Ls = max(Ls, float(np.linalg.norm(self.noise(t, *a) - self.noise(t, *c))) / dist)
        return {"b": Lb, "sigma": Ls}

    # linear bundles -------------------------------------------------------
    @classmethod
    def linear(cls, A, B=None, A1=None, C=None, C1=None, B1=None, D=None, D1=None,
               b0=None, sigma0=None, m=None, modes=None):
        """Bundle with ``b = A1 x_d + C u + C1 u_d + b0`` and
        ``sigma e_k = B1[k] x_d + D[k] u + D1[k] u_d + sigma0[:, k]``.

        ``B1`` has shape ``(modes, n, n)``; ``D``, ``D1`` have shape
        ``(modes, n, m)``; all other matrices are as in the formulas.
        """
        A = np.asarray(A, dtype=float)
        n = A.shape[0]
        if m is None:
            m = next((np.shape(M)[-1] for M in (C, C1, D, D1) if M is not None), 1)
        if modes is None:
            modes = next((np.shape(M)[0] for M in (B, B1, D, D1) if M is not None),
                         1 if sigma0 is None else np.shape(sigma0)[1])
        Z = lambda *s: np.zeros(s)
        A1 = Z(n, n) if A1 is None else np.asarray(A1, float)
        C = Z(n, m) if C is None else np.asarray(C, float)
        C1 = Z(n, m) if C1 is None else np.asarray(C1, float)
        B1 = Z(modes, n, n) if B1 is None else np.asarray(B1, float)
        D = Z(modes, n, m) if D is None else np.asarray(D, float)
        D1 = Z(modes, n, m) if D1 is None else np.asarray(D1, float)
        s0 = Z(n, modes) if sigma0 is None else np.asarray(sigma0, float)

        def b(t, x, xd, u, ud):
            out = xd @ A1.T + u @ C.T + ud @ C1.T
            if b0 is not None:
                out = out + np.asarray(_at(b0, t), float)
            return out

        def sigma(t, x, xd, u, ud):
            return (np.einsum("kij,pj->pik", B1, xd) + np.einsum("kij,pj->pik", D, u)
                    + np.einsum("kij,pj->pik", D1, ud) + s0)

        const = lambda M: (lambda t, x, xd, u, ud: M[None])
        bundle = cls(
            n=n, m=m, modes=modes, A=A, B=None if B is None else np.asarray(B, float),
            b=b, b_x=None, b_xd=const(A1), b_u=const(C), b_ud=const(C1),
            sigma=sigma, sigma_x=None, sigma_xd=const(np.transpose(B1, (1, 0, 2))),
            sigma_u=const(np.transpose(D, (1, 0, 2))), sigma_ud=const(np.transpose(D1, (1, 0, 2))),
            check=False)
        bundle.matrices = dict(A1=A1, C=C, C1=C1, B1=B1, D=D, D1=D1, sigma0=s0)
        return bundle


def initial_path(x0, grid, n):
    """Values of the initial datum on the nodes of ``[-delta, 0]``, shape ``(n_delay + 1, n)``."""
    t = grid.times[:grid.i0 + 1]
    if callable(x0):
        return np.array([np.asarray(x0(s), dtype=float).reshape(n) for s in t])
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (n,) or x0.size == n:
        return np.broadcast_to(x0.reshape(n), (t.size, n)).copy()
    if x0.shape == (t.size, n):
        return x0.copy()
    raise PreconditionError(f"initial path has shape {x0.shape}, expected {(t.size, n)} or {(n,)}")


def control_nodes(u, grid, m):
    """Open-loop control on the nodes of ``[-delta, T]``.

    Accepts an array ``(iT + 1, m)`` or ``(iT + 1, P, m)``, a callable of
    ``t`` or ``None`` (zero control).
    """
    N = grid.iT + 1
    if u is None:
        return np.zeros((N, m))
    if callable(u):
        return np.array([np.asarray(u(t), dtype=float).reshape(m) for t in grid.times[:N]])
    u = np.asarray(u, dtype=float)
    if u.shape[0] != N or u.shape[-1] != m:
        raise PreconditionError(f"control has shape {u.shape}, expected ({N}, [P,] {m})")
    return u


@dataclass
class PathEnsemble:
    """Monte Carlo bundle of grid paths on ``[-delta, T]``.

    ``x`` has shape ``(iT + 1, n_traj, n)``; ``dw`` holds the increments used,
    shape ``(n_T, n_traj, modes)``.
    """

    x: np.ndarray
    grid: object
    seed: int
    dw: np.ndarray

    @property
    def n_traj(self):
        return self.x.shape[1]

    def delayed(self, weights):
        """``x_d`` on the nodes of ``[0, T]``, shape ``(n_T + 1, P, n)``."""
        nodes = np.arange(self.grid.i0, self.grid.iT + 1)
        return lagged_sum(self.x, weights, nodes, -1)

    def summary(self, triple=None):
        xT = self.x[-1]
        tail = self.x[self.grid.i0:]
        sq = np.sum(tail ** 2, axis=-1) if triple is None else triple.h_inner(tail, tail)
        return {
            "n_traj": int(self.n_traj),
            "mean_T": xT.mean(axis=0).tolist(),
            "var_T": xT.var(axis=0).tolist(),
            "second_moment_T": float(np.mean(np.sum(xT ** 2, axis=-1))),
            "mean_sup_sq_norm": float(np.mean(sq.max(axis=0))),
        }

    def to_csv(self, path):
        t = self.grid.times[: self.x.shape[0]]
        n = self.x.shape[2]
        with open(path, "w") as fh:
            fh.write("traj,t," + ",".join(f"x_{i + 1}" for i in range(n)) + "\n")
            for p in range(self.n_traj):
                for i, ti in enumerate(t):
                    fh.write(f"{p},{ti:.17g}," + ",".join(f"{v:.17g}" for v in self.x[i, p]) + "\n")


def _implicit_inverse(bundle, triple, grid, t):
    M = np.eye(triple.n) - grid.dt * triple.lift_matrix @ bundle.A_at(t)
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalAbort(
            "implicit step matrix is singular; reduce dt",
            {"t": t, "suggested_dt": grid.dt / 2}) from exc


def _simulate_block(bundle, triple, X0, u, W, grid, dw, trajs):
    P, n = dw.shape[1], triple.n
    X = np.empty((grid.iT + 1, P, n))
    X[: grid.i0 + 1] = X0[:, None, :]
    if u.ndim == 2:
        U = np.broadcast_to(u[:, None, :], (u.shape[0], P, u.shape[1]))
    else:
        U = u[:, trajs]
    const_A = not callable(bundle.A)
    Sinv = _implicit_inverse(bundle, triple, grid, 0.0) if const_A else None
    for i in range(grid.n_T):
        gi = grid.i0 + i
        t = i * grid.dt
        x = X[gi]
        xd = lagged_sum(X, W, [gi], -1)[0]
        ud = lagged_sum(U, W, [gi], -1)[0]
        ui = U[gi]
        rhs = x + grid.dt * bundle.drift(t, x, xd, ui, ud)
        vol = bundle.noise(t, x, xd, ui, ud)
        Bt = bundle.B_at(t)
        if Bt is not None:
            vol = vol + apply_B(Bt, x)
        rhs = rhs + np.einsum("pik,pk->pi", vol, dw[i])
        S = Sinv if const_A else _implicit_inverse(bundle, triple, grid, t)
        X[gi + 1] = rhs @ S.T
        nxt = X[gi + 1]
        norms = np.sqrt(np.maximum(triple.h_inner(nxt, nxt), 0.0))
        bad = ~np.isfinite(norms) | (norms > BLOWUP)
        if np.any(bad):
            raise NumericalAbort(
                f"forward solution left the admissible range at t = {t + grid.dt:.6g}",
                {"step": i + 1, "trajectories": [int(trajs[j]) for j in np.flatnonzero(bad)[:10]],
                 "max_norm": float(np.nanmax(np.where(np.isfinite(norms), norms, np.inf)))})
    return X


def solve_sdee(bundle, triple, x0, u, m, grid, noise, n_traj=1, seed=0, workers=1, dw=None):
    """Simulate ``n_traj`` paths of the delayed equation on ``[-delta, T]``.

    Parameters
    ----------
    bundle : CoefficientBundle
    triple : GelfandTriple
    x0 : initial datum (vector, node array or callable)
    u : control on ``[-delta, T]`` (see :func:`control_nodes`)
    m : DelayMeasure
    grid : TimeGrid
    noise : NoiseModel
    dw : array, optional
        Increments ``(n_T, n_traj, modes)``; sampled from ``seed`` if omitted.

    Returns
    -------
    PathEnsemble
    """
    if bundle.n != triple.n:
        raise PreconditionError("bundle and triple dimensions differ")
    if bundle.modes != noise.modes:
        raise PreconditionError("bundle and noise mode counts differ")
    W = m.lag_weights(grid.dt)
    if len(W) - 1 > grid.n_delay:
        raise PreconditionError("measure support exceeds the grid delay")
    X0 = initial_path(x0, grid, triple.n)
    U = control_nodes(u, grid, bundle.m)
    if dw is None:
        dw = sample_increments(noise, grid, n_traj, seed)
    n_traj = dw.shape[1]
    if U.ndim == 3 and U.shape[1] != n_traj:
        raise PreconditionError("adapted control has the wrong number of trajectories")
    blocks = [np.arange(s, min(s + BLOCK, n_traj)) for s in range(0, n_traj, BLOCK)]

    def run(tr):
        return _simulate_block(bundle, triple, X0, U, W, grid, dw[:, tr], tr)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return PathEnsemble(np.concatenate(parts, axis=1), grid, seed, dw)


def stability_probe(bundle, triple, x0, direction, scales, u, m, grid, noise, n_traj=200, seed=0):
    """Paired runs from ``x0`` and ``x0 + eps * direction`` with common noise.

    For each ``eps`` the ratio ``E sup_t ||x - x'||_H^2`` over
    ``||x0(0) - x0'(0)||^2 + int ||x0 - x0'||^2`` is reported.  For linear
    systems the ratio does not depend on ``eps``.
    """
    dw = sample_increments(noise, grid, n_traj, seed)
    base = solve_sdee(bundle, triple, x0, u, m, grid, noise, dw=dw)
    X0 = initial_path(x0, grid, triple.n)
    D0 = initial_path(direction, grid, triple.n)
    ratios, numerators = [], []
    for eps in scales:
        pert = solve_sdee(bundle, triple, X0 + eps * D0, u, m, grid, noise, dw=dw)
        diff = pert.x - base.x
        num = float(np.mean(triple.h_inner(diff, diff).max(axis=0)))
        d0 = eps * D0
        den = float(triple.h_inner(d0[-1], d0[-1]) + grid.dt * np.sum(triple.h_inner(d0, d0)))
        numerators.append(num)
        ratios.append(num / den if den > 0 else (0.0 if num == 0 else np.inf))
    r = np.asarray(ratios)
    spread = float(r.max() / r.min() - 1.0) if r.size and r.min() > 0 else 0.0
    return {"scales": list(map(float, scales)), "ratios": r.tolist(), "numerators": numerators,
            "spread": spread, "bound": float(r.max(initial=0.0)), "finite": bool(np.all(np.isfinite(r)))}


def solve_linear_sdde_scalar(a, a_d, g, g_d, m, grid, dw, init=-1.0):
    """Explicit Euler for the scalar linear delayed equation

        dk = [a k + (a_d k)_d] dt + sum_k [g^k k + (g_d^k k)_d] dw_k,   k(0) = init,

    with ``k = 0`` on ``[-delta, 0)`` and ``(c k)_d(t) = int c(t+s) k(t+s) m(ds)``.

    ``a``, ``a_d`` broadcast to ``(n_T + 1, P)``; ``g``, ``g_d`` to
    ``(n_T + 1, P, modes)``; ``dw`` has shape ``(n_T, P, modes)``.  Returns
    ``k`` on the nodes of ``[-delta, T]``, shape ``(iT + 1, P)``.
    """
    n_T, P, modes = dw.shape
    W = m.lag_weights(grid.dt)
    a = np.broadcast_to(np.asarray(a, float), (n_T + 1, P))
    a_d = np.broadcast_to(np.asarray(a_d, float), (n_T + 1, P))
    g = np.broadcast_to(np.asarray(g, float), (n_T + 1, P, modes))
    g_d = np.broadcast_to(np.asarray(g_d, float), (n_T + 1, P, modes))
    k = np.zeros((grid.iT + 1, P))
    k[grid.i0] = init
    # products c * k stored on the full node range so lag reads before 0 see zeros
    ak = np.zeros((grid.iT + 1, P))
    gk = np.zeros((grid.iT + 1, P, modes))
    use_ad = np.any(a_d != 0)
    use_gd = np.any(g_d != 0)
    for i in range(n_T):
        gi = grid.i0 + i
        ki = k[gi]
        if use_ad:
            ak[gi] = a_d[i] * ki
        if use_gd:
            gk[gi] = g_d[i] * ki[:, None]
        drift = a[i] * ki
        vol = g[i] * ki[:, None]
        if use_ad:
            drift = drift + lagged_sum(ak, W, [gi], -1)[0]
        if use_gd:
            vol = vol + lagged_sum(gk, W, [gi], -1)[0]
        k[gi + 1] = ki + grid.dt * drift + np.sum(vol * dw[i], axis=1)
        if not np.all(np.isfinite(k[gi + 1])) or np.abs(k[gi + 1]).max() > BLOWUP:
            raise NumericalAbort("k-equation diverged", {"step": i + 1})
    return k
