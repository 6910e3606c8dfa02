"""Finite-dimensional Gelfand triple, truncated Q-Brownian noise and related checks.

Coordinates
-----------
States live in H-coordinates ``x`` with ``<x, y>_H = x^T M_H y`` and
``||x||_V^2 = x^T M_V x``.  A functional ``f`` in V* is stored by its
coefficient vector, paired as ``<f, x>_* = f^T x``; it acts as an H-vector
through the lift ``M_H^{-1} f``.

An operator from the noise space to H (an ``HSOperator``) is an ``(n, modes)``
array whose column ``k`` is the image of the eigenvector ``e_k``.  A linear
map ``B`` from V to such operators is a ``(modes, n, n)`` array with
``(B x) e_k = B[k] @ x``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg

from .delay_measures import _as_steps
from .errors import PreconditionError


def _spd(mat, name):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise PreconditionError(f"{name} must be a square matrix")
    if not np.allclose(mat, mat.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(mat).max())):
        raise PreconditionError(f"{name} must be symmetric")
    mat = 0.5 * (mat + mat.T)
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise PreconditionError(f"{name} must be positive definite")
    return mat


class GelfandTriple:
    """Surrogate of ``V ⊂ H ⊂ V*`` given by two SPD inner-product matrices."""

    def __init__(self, M_H, M_V):
        self.M_H = _spd(M_H, "M_H")
        self.M_V = _spd(M_V, "M_V")
        if self.M_H.shape != self.M_V.shape:
            raise PreconditionError("M_H and M_V must have the same shape")
        self.n = self.M_H.shape[0]
        self._H_factor = linalg.cho_factor(self.M_H)
        self._V_factor = linalg.cho_factor(self.M_V)
        self.V_chol = np.linalg.cholesky(self.M_V)
        self.embedding_constant = float(np.sqrt(linalg.eigh(self.M_H, self.M_V, eigvals_only=True).max()))
        self.lift_matrix = linalg.cho_solve(self._H_factor, np.eye(self.n))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), np.eye(n))

    def h_inner(self, x, y):
        return np.einsum("...i,ij,...j->...", x, self.M_H, y)

    def h_norm(self, x):
        return np.sqrt(np.maximum(self.h_inner(x, x), 0.0))

    def v_norm(self, x):
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.M_V, x), 0.0))

    def dual_norm(self, f):
        """``||f||_* = sup f^T x / ||x||_V = sqrt(f^T M_V^{-1} f)``."""
        f = np.asarray(f, dtype=float)
        g = linalg.cho_solve(self._V_factor, f.reshape(-1, self.n).T).T.reshape(f.shape)
        return np.sqrt(np.maximum(np.sum(f * g, axis=-1), 0.0))

    def lift(self, f):
        """H-coordinates ``M_H^{-1} f`` of a V* functional (last axis)."""
        return np.asarray(f) @ self.lift_matrix.T


class NoiseModel:
    """Truncated Q-Brownian motion ``w = sum_k beta_k sqrt(lam_k) e_k``.

    Increments in mode ``k`` are ``sqrt(lam_k dt) * xi``.  Every trajectory
    has its own generator seeded by ``(seed, trajectory index)``, so any
    subset of trajectories can be regenerated independently.
    """

    def __init__(self, eigenvalues):
        lam = np.atleast_1d(np.asarray(eigenvalues, dtype=float))
        if lam.ndim != 1 or lam.size == 0:
            raise PreconditionError("eigenvalues must be a non-empty 1-d sequence")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise PreconditionError("eigenvalues must be finite and non-negative")
        self.eigenvalues = lam
        self.modes = lam.size

    @classmethod
    def from_spec(cls, modes, eigenvalues="identity"):
        if isinstance(eigenvalues, str):
            if eigenvalues == "identity":
                return cls(np.ones(modes))
            if eigenvalues.startswith("geometric:"):
                r = float(eigenvalues.split(":", 1)[1])
                return cls(r ** np.arange(1, modes + 1))
            raise PreconditionError(f"unknown eigenvalue spec {eigenvalues!r}")
        lam = np.asarray(eigenvalues, dtype=float)
        if lam.size != modes:
            raise PreconditionError("eigenvalue list length differs from 'modes'")
        return cls(lam)

    @property
    def trace(self):
        return float(self.eigenvalues.sum())

    def inverse_eigenvalues(self):
        """``1 / lam_k`` with zero for silent modes."""
        lam = self.eigenvalues
        return np.divide(1.0, lam, out=np.zeros_like(lam), where=lam > 0)


def trajectory_rng(seed, index):
    """Generator for trajectory ``index`` of a run with master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_increments(noise, grid, n_traj, seed, first=0, n_steps=None):
    """Brownian increments on ``[0, T]``, shape ``(n_steps, n_traj, modes)``.

    Trajectory ``first + j`` always receives the same numbers, whatever
    ``n_traj`` and ``first`` are.
    """
    if not grid.dt > 0:
        raise PreconditionError("dt must be positive")
    n_steps = grid.n_T if n_steps is None else int(n_steps)
    scale = np.sqrt(noise.eigenvalues * grid.dt)
    out = np.empty((n_steps, n_traj, noise.modes))
    for j in range(n_traj):
        out[:, j, :] = trajectory_rng(seed, first + j).standard_normal((n_steps, noise.modes))
    out *= scale
    return out


def hs_norm(phi, noise, triple=None):
    """``||Phi||_{L2^0} = sqrt(sum_k lam_k <Phi e_k, Phi e_k>_H)``.

    ``phi`` has shape ``(..., n, modes)``.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != noise.modes:
        raise PreconditionError(f"operator has {phi.shape[-1]} columns, noise has {noise.modes} modes")
    if triple is None:
        sq = np.sum(phi ** 2, axis=-2)
    else:
        if phi.shape[-2] != triple.n:
            raise PreconditionError("operator rows differ from state dimension")
        sq = np.einsum("...ik,ij,...jk->...k", phi, triple.M_H, phi)
    return np.sqrt(np.maximum(np.sum(sq * noise.eigenvalues, axis=-1), 0.0))


def hs_inner(phi, psi, noise, triple):
    """``<Phi, Psi>_{L2^0}``, batched over leading axes."""
    return np.einsum("...ik,ij,...jk,k->...", phi, triple.M_H, psi, noise.eigenvalues)


def apply_B(B, x):
    """``(B x)`` as an ``(..., n, modes)`` operator for ``B`` of shape ``(modes, n, n)``."""
    return np.einsum("kij,...j->...ik", B, x)


@dataclass
class FiniteVariationIntegrator:
    """Real finite-variation integrator ``F``: atoms ``(t_j, dF_j)`` plus a density.

    ``bound`` is an optional total-variation bound which is checked at
    construction.
    """

    atoms: tuple = ()
    density: object = None
    T: float = 1.0
    bound: float = None

    def __post_init__(self):
        self.atoms = tuple((float(t), float(w)) for t, w in self.atoms)
        for t, _ in self.atoms:
            if t < 0 or t > self.T * (1 + 1e-12):
                raise PreconditionError(f"atom at {t!r} outside [0, {self.T}]")
        if self.bound is not None and self.total_variation() > self.bound * (1 + 1e-12):
            raise PreconditionError(
                f"total variation {self.total_variation()!r} exceeds bound {self.bound!r}")

    def total_variation(self, n_quad=4001):
        tv = sum(abs(w) for _, w in self.atoms)
        if self.density is not None:
            s = np.linspace(0.0, self.T, n_quad)
            tv += float(integrate.trapezoid(np.abs(self.density(s)), s))
        return tv

    def step_masses(self, grid):
        """``F((t_i, t_{i+1}])`` for the steps of ``[0, T]``, shape ``(n_T,)``.

        Atoms are assigned to the step whose half-open interval contains
        them (an atom at 0 is dropped); densities use the trapezoid rule.
        """
        out = np.zeros(grid.n_T)
        for t, w in self.atoms:
            if t <= 0.0:
                continue
            i = int(np.ceil(t / grid.dt - 1e-9)) - 1
            out[min(max(i, 0), grid.n_T - 1)] += w
        if self.density is not None:
            t = np.arange(grid.n_T + 1) * grid.dt
            d = np.asarray(self.density(t), dtype=float)
            out += 0.5 * (d[:-1] + d[1:]) * grid.dt
        return out

    def node_atoms(self, grid):
        """Atom masses by node on ``[0, T]``; raises if an atom is off-grid."""
        out = np.zeros(grid.n_T + 1)
        for t, w in self.atoms:
            out[_as_steps(t, grid.dt, "atom time")] += w
        return out


@dataclass
class CoercivityReport:
    passes: bool
    max_value: float
    sampled_max: float
    K1: float
    C1: float
    alpha: float
    lam: float
    tolerance: float
    n_samples: int
    worst_time: float = None
    details: dict = field(default_factory=dict)


def _at(op, t):
    return op(t) if callable(op) else op


def check_coercivity(A, B, triple, noise, alpha, lam, n_samples=200, seed=0, T=1.0, n_times=None):
    """Check ``2<Ax, x>_* + ||Bx||^2_{L2^0} <= -alpha ||x||_V^2 + lam ||x||_H^2``.

    ``A`` is an ``(n, n)`` array or a function of ``t``; ``B`` likewise with
    shape ``(modes, n, n)`` or ``None``.  The left side minus the right side
    is homogeneous of degree two, so ``x`` is drawn on the V-unit sphere.
    At every sampled time the maximum over the whole sphere is also
    computed exactly as a generalised eigenvalue; the verdict uses that
    exact maximum, the random samples are reported alongside.
    """
    if not alpha > 0:
        raise PreconditionError("alpha must be positive")
    rng = np.random.default_rng(seed)
    n = triple.n
    n_times = max(1, min(n_samples, 16)) if n_times is None else n_times
    times = np.concatenate([[0.0], rng.uniform(0.0, T, n_times - 1)]) if n_times > 1 else np.array([0.0])
    lam_k = noise.eigenvalues
    exact_max, K1, C1, worst_t, scale = -np.inf, 0.0, 0.0, 0.0, 1.0
    forms = []
    for t in times:
        At = np.asarray(_at(A, t), dtype=float)
        Bt = None if B is None else np.asarray(_at(B, t), dtype=float)
        noise_form = np.zeros((n, n)) if Bt is None else np.einsum("k,kai,ab,kbj->ij", lam_k, Bt, triple.M_H, Bt)
        Q = At + At.T + noise_form + alpha * triple.M_V - lam * triple.M_H
        Q = 0.5 * (Q + Q.T)
        top = float(linalg.eigh(Q, triple.M_V, eigvals_only=True).max())
        if top > exact_max:
            exact_max, worst_t = top, float(t)
        AtMA = At.T @ linalg.cho_solve(triple._V_factor, At)
        K1 = max(K1, float(np.sqrt(max(0.0, linalg.eigh(0.5 * (AtMA + AtMA.T), triple.M_V, eigvals_only=True).max()))))
        C1 = max(C1, float(np.sqrt(max(0.0, linalg.eigh(noise_form, triple.M_V, eigvals_only=True).max()))))
        scale = max(scale, np.abs(Q).max() / max(np.abs(triple.M_V).max(), 1e-300))
        forms.append(Q)
    # random points on the V-unit sphere
    z = rng.standard_normal((n_samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    x = linalg.solve_triangular(triple.V_chol.T, z.T, lower=False).T
    pick = rng.integers(0, len(forms), n_samples)
    vals = np.einsum("si,sij,sj->s", x, np.asarray(forms)[pick], x)
    tol = 1e-10 * scale
    return CoercivityReport(
        passes=bool(exact_max <= tol), max_value=exact_max, sampled_max=float(vals.max()),
        K1=K1, C1=C1, alpha=float(alpha), lam=float(lam), tolerance=tol, n_samples=int(n_samples),
        worst_time=worst_t)


@dataclass
class EnergyReport:
    passes: bool
    deterministic: bool
    probe_times: list
    residual_mean: list
    residual_se: list
    max_abs_residual: float
    jump_correction: list
    detects_missing_correction: bool
    passes_without_correction: bool
    tolerance: float
    n_traj: int


def _path_value(obj, t, i, h, shape):
    if obj is None:
        return np.zeros(shape)
    if callable(obj):
        return np.broadcast_to(np.asarray(obj(t, h), dtype=float), shape)
    return np.broadcast_to(np.asarray(obj[i], dtype=float), shape)


def ito_energy_check(v_star, zeta, F, q, x0, triple, noise, grid, n_traj=1, seed=0,
                     probe_times=None, include_jump_correction=True):
    """Monte Carlo check of the energy identity for a semimartingale with jumps.

    The process ``h = v(0) + int v* ds + int zeta dF + int q dw`` is simulated
    on the nodes of ``[0, T]``.  ``v_star`` (V*-coefficients), ``zeta``
    (H-vectors) and ``q`` (``(n, modes)`` operators) are either arrays
    indexed by ``[0, T]`` node, callables ``(t, h) -> value`` with ``h`` of
    shape ``(n_traj, n)``, or ``None``.  On each step the drift, the
    density part of ``F`` and ``q`` are frozen at the left node; atoms of
    ``F`` act at nodes and must be grid-aligned.

    With the drift frozen the continuous part of ``h`` is piecewise linear
    and every ``ds``/``dF`` integral is evaluated in closed form, so without
    noise the identity holds to rounding.  With noise the residual has
    mean zero and the check is a 4-standard-error test.
    """
    n = triple.n
    x0 = np.asarray(x0, dtype=float).reshape(n)
    atoms = F.node_atoms(grid) if F is not None else np.zeros(grid.n_T + 1)
    if atoms[0] != 0.0:
        raise PreconditionError("an atom at t = 0 is not integrated over (0, t]")
    dens = None if (F is None or F.density is None) else F.density
    if probe_times is None:
        probe_times = [grid.T * f for f in (0.25, 0.5, 0.75, 1.0)]
    probes = {}
    for t in probe_times:
        probes[_as_steps(t, grid.dt, "probe time")] = float(t)
    stochastic = q is not None
    dw = sample_increments(noise, grid, n_traj, seed) if stochastic else None
    P = n_traj
    h = np.broadcast_to(x0, (P, n)).copy()
    lhs0 = triple.h_inner(h, h)
    drift = np.zeros(P)
    fterm = np.zeros(P)
    mart = np.zeros(P)
    qv = np.zeros(P)
    corr = np.zeros(P)
    out_res, out_corr = {}, {}
    for i in range(grid.n_T):
        t = i * grid.dt
        vs = _path_value(v_star, t, i, h, (P, n))
        zl = _path_value(zeta, t, i, h, (P, n))
        phi = 0.0 if dens is None else float(dens(t))
        c = triple.lift(vs) + phi * zl
        drift += 2 * grid.dt * np.sum(vs * h, axis=1) + grid.dt ** 2 * np.sum(vs * c, axis=1)
        if phi != 0.0:
            fterm += phi * (2 * grid.dt * triple.h_inner(h, zl) + grid.dt ** 2 * triple.h_inner(zl, c))
        h_minus = h + grid.dt * c
        if stochastic:
            qi = _path_value(q, t, i, h, (P, n, noise.modes))
            incr = np.einsum("pik,pk->pi", qi, dw[i])
            mart += 2 * triple.h_inner(h, incr)
            qv += hs_norm(qi, noise, triple) ** 2 * grid.dt
            h_minus = h_minus + incr
        dF = atoms[i + 1]
        if dF != 0.0:
            zj = _path_value(zeta, t + grid.dt, i + 1, h_minus, (P, n))
            h = h_minus + dF * zj
            fterm += 2 * dF * triple.h_inner(h, zj)
            corr += triple.h_inner(zj, zj) * dF * dF
        else:
            h = h_minus
        node = i + 1
        if node in probes:
            rhs = lhs0 + drift + fterm + mart + qv - corr
            out_res[node] = triple.h_inner(h, h) - rhs
            out_corr[node] = corr.copy()
    keys = sorted(out_res)
    res = np.array([out_res[k] for k in keys])
    cor = np.array([out_corr[k] for k in keys])
    scale = 1.0 + float(x0 @ triple.M_H @ x0)
    tol = 1e-10 * max(scale, float(np.abs(res).max(initial=0.0)), 1.0)

    def verdict(r):
        mean = r.mean(axis=1)
        if not stochastic:
            return bool(np.abs(r).max(initial=0.0) <= tol), mean, np.zeros_like(mean)
        se = r.std(axis=1, ddof=1) / np.sqrt(P) if P > 1 else np.full_like(mean, np.inf)
        ok = np.all(np.abs(mean) <= 4 * se + tol)
        return bool(ok), mean, se

    if include_jump_correction:
        ok, mean, se = verdict(res)
        ok_nc, _, _ = verdict(res - cor)
    else:
        ok, mean, se = verdict(res - cor)
        ok_nc = ok
    return EnergyReport(
        passes=ok, deterministic=not stochastic, probe_times=[probes[k] for k in keys],
        residual_mean=mean.tolist(), residual_se=se.tolist(),
        max_abs_residual=float(np.abs(res).max(initial=0.0)),
        jump_correction=cor.mean(axis=1).tolist(),
        detects_missing_correction=(not ok_nc) and bool(np.any(cor != 0)),
        passes_without_correction=ok_nc, tolerance=tol, n_traj=P)
