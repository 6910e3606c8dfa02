"""Controlled super-parabolic SPDE with a pointwise delay on ``[0, L]``.

Model (Dirichlet boundary, ``zeta`` the space variable)::

    dx = [d(a dx/dzeta)/dzeta + a_adv dx/dzeta + kappa tanh(x(t - delta)) + sum_j u_j phi_j] dt
         + beta dx/dzeta dw_0 + sum_{k>=1} s0 g_k dw_k

    J(u) = int (x(T) - target)^2 dzeta + int_0^T [rho |u|^2 + c_x int x^2 dzeta] dt

Finite differences on ``n_space`` interior nodes with spacing ``h``:
``M_H = h I`` (lumped mass), ``M_V = M_H + K(1)`` with ``K(a)`` the stiffness
form ``sum_e a_e (x_{i+1} - x_i)^2 / h``, edge diffusion ``a_e`` the mean of
the nodal values, upwind differences for the advection and central
differences for ``beta dx/dzeta``.  With these choices the pointwise
condition ``alpha + beta^2 <= 2 a`` at every node implies the discrete
coercivity inequality with ``lam = alpha`` (the advection part is
dissipative).  The control acts through a few smooth actuator profiles,
so its dimension does not depend on the mesh.

Noise mode 0 has eigenvalue 1 and drives the gradient noise; modes
``1 .. n_additive`` carry additive sine profiles with eigenvalues ``r^k``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .absde_backward import CondEstimator, Generator, Terminal
from .delay_measures import DelayMeasure, TimeGrid
from .errors import PreconditionError
from .hilbert_core import GelfandTriple, NoiseModel, check_coercivity
from .sdee_forward import CoefficientBundle
from . import smp_optimizer as smp


def _field(value):
    if callable(value):
        return value
    c = float(value)
    return lambda z: np.full_like(np.asarray(z, float), c)


@dataclass
class SPDESpec:
    """Scenario description; scalar fields may be constants or callables of ``zeta``."""

    n_space: int = 16
    length: float = 1.0
    diffusion: object = 1.0
    advection: object = 0.2
    beta: object = 0.5
    kappa: float = 0.5
    delta: float = 0.1
    T: float = 1.0
    dt: float = 0.01
    n_actuators: int = 3
    n_additive: int = 3
    noise_ratio: float = 0.5
    noise_scale: float = 0.1
    control_weight: float = 0.05
    state_weight: float = 0.1
    target: object = None
    x0: object = 0.0
    u_max: float = 1.0
    alpha: float = 0.5
    lam: float = None
    n_traj: int = 32
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_space < 1:
            raise PreconditionError("n_space must be positive")
        if self.lam is None:
            self.lam = self.alpha

    @property
    def h(self):
        return self.length / (self.n_space + 1)

    def nodes(self, with_boundary=False):
        z = np.linspace(0.0, self.length, self.n_space + 2)
        return z if with_boundary else z[1:-1]

    def target_values(self):
        z = self.nodes()
        if self.target is None:
            return np.sin(np.pi * z / self.length)
        return _field(self.target)(z)

    def actuators(self):
        """Nodal actuator profiles, shape ``(n_space, n_actuators)``."""
        z = self.nodes()
        return np.column_stack([np.sin((j + 1) * np.pi * z / self.length) for j in range(self.n_actuators)])

    def noise_profiles(self):
        z = self.nodes()
        return np.column_stack([np.sin(k * np.pi * z / self.length) for k in range(1, self.n_additive + 1)])

    def noise_model(self):
        lam = [1.0] + [self.noise_ratio ** k for k in range(1, self.n_additive + 1)]
        return NoiseModel(lam)

    def refined(self, factor=2):
        return replace(self, n_space=factor * (self.n_space + 1) - 1)

    def parabolicity(self):
        """Pointwise super-parabolicity ``alpha + beta^2 <= 2 a <= K`` at all nodes."""
        z = self.nodes(with_boundary=True)
        a = _field(self.diffusion)(z)
        b = _field(self.beta)(z)
        gap = 2 * a - self.alpha - b ** 2
        worst = int(np.argmin(gap))
        return {"holds": bool(np.all(gap >= -1e-14)), "min_gap": float(gap.min()),
                "worst_node": worst, "worst_zeta": float(z[worst]), "K": float(2 * a.max())}


def build_operators(spec, check=True):
    """Return ``(triple, A, B, report)`` for the spatial discretisation.

    ``A`` is the V* coefficient matrix, ``B`` has shape
    ``(modes, n, n)`` with only mode 0 nonzero.  With ``check`` a coercivity
    failure raises and names the node where the pointwise condition fails.
    """
    n, h = spec.n_space, spec.h
    z = spec.nodes(with_boundary=True)
    a_nodes = _field(spec.diffusion)(z)
    a_edges = 0.5 * (a_nodes[:-1] + a_nodes[1:])
    adv = _field(spec.advection)(z[1:-1])
    beta = _field(spec.beta)(z[1:-1])

    def stiffness(edge_weights):
        K = np.zeros((n, n))
        for e, w in enumerate(edge_weights):
            # edge e joins full-grid nodes e and e + 1, i.e. interior indices e - 1 and e
            lo, hi = e - 1, e
            c = w / h
            if lo >= 0:
                K[lo, lo] += c
            if hi < n:
                K[hi, hi] += c
            if lo >= 0 and hi < n:
                K[lo, hi] -= c
                K[hi, lo] -= c
        return K

    M_H = h * np.eye(n)
    M_V = M_H + stiffness(np.ones(n + 1))
    upwind = np.zeros((n, n))
    for i in range(n):
        if adv[i] >= 0:
            upwind[i, i] -= adv[i]
            if i + 1 < n:
                upwind[i, i + 1] += adv[i]
        else:
            upwind[i, i] += adv[i]
            if i - 1 >= 0:
                upwind[i, i - 1] -= adv[i]
    A = -stiffness(a_edges) + upwind
    central = np.zeros((n, n))
    for i in range(n):
        if i + 1 < n:
            central[i, i + 1] = 1.0 / (2 * h)
        if i - 1 >= 0:
            central[i, i - 1] = -1.0 / (2 * h)
    noise = spec.noise_model()
    B = np.zeros((noise.modes, n, n))
    B[0] = beta[:, None] * central
    triple = GelfandTriple(M_H, M_V)
    report = check_coercivity(A, B, triple, noise, spec.alpha, spec.lam)
    pointwise = spec.parabolicity()
    if check and not report.passes:
        raise PreconditionError(
            f"coercivity fails (max {report.max_value:.3g}); the pointwise condition "
            f"alpha + beta^2 <= 2a is tightest at node {pointwise['worst_node']} "
            f"(zeta = {pointwise['worst_zeta']:.4g}, gap {pointwise['min_gap']:.3g})")
    return triple, A, B, {"coercivity": report, "parabolicity": pointwise}


def build_problem(spec, check=True):
    """Assemble the :class:`~delaysmp.smp_optimizer.ControlProblem` of a scenario."""
    triple, A, B, report = build_operators(spec, check=check)
    n, mdim = spec.n_space, spec.n_actuators
    noise = spec.noise_model()
    grid = TimeGrid(spec.dt, spec.T, spec.delta)
    m = DelayMeasure.dirac(spec.delta)
    act = spec.actuators()
    prof = spec.noise_profiles()
    kappa = spec.kappa
    sig = np.zeros((n, noise.modes))
    sig[:, 1:] = spec.noise_scale * prof

    def b(t, x, xd, u, ud):
        return kappa * np.tanh(xd) + u @ act.T

    def b_xd(t, x, xd, u, ud):
        d = kappa / np.cosh(xd) ** 2
        return d[:, :, None] * np.eye(n)[None]

    bundle = CoefficientBundle(
        n=n, m=mdim, modes=noise.modes, A=A, B=B, b=b, b_xd=b_xd,
        b_u=lambda t, x, xd, u, ud: act[None], sigma=lambda t, x, xd, u, ud: sig[None],
        check=True)
    h, rho, cx = spec.h, spec.control_weight, spec.state_weight
    tgt = spec.target_values()
    gen = Generator(
        f=lambda t, x, xd, y, ya, z, za, u, ud: rho * np.sum(u ** 2, axis=1) + cx * h * np.sum(x ** 2, axis=1),
        f_x=lambda t, x, *a: 2 * cx * h * x,
        f_u=lambda t, x, xd, y, ya, z, za, u, ud: 2 * rho * u)
    term = Terminal(h=lambda x, xn: h * np.sum((x - tgt) ** 2, axis=1), h_x=lambda x, xn: 2 * h * (x - tgt))
    U = smp.AdmissibleSet("box", lower=-spec.u_max, upper=spec.u_max, m=mdim)
    x0 = _field(spec.x0)(spec.nodes())
    problem = smp.ControlProblem(triple, noise, grid, bundle, gen, term, m, nu=None, x0=x0, U=U, convex=None)
    return problem, report


def zero_cost(problem):
    """Same problem with ``f = h = 0``."""
    return replace(problem, f=Generator(), h=Terminal())


def run_demo(spec, tol=1e-4, max_iter=60, workers=1, do_check=True):
    """Optimize one scenario from the zero control and check the gradient at the result."""
    problem, ops = build_problem(spec)
    dw = problem.increments(spec.n_traj, spec.seed)
    est = CondEstimator("exact-linear")
    u0 = problem.control(None)
    base = smp.solve_all(problem, u0, dw, est, workers)
    opt = smp.optimize(problem, u0, tol=tol, max_iter=max_iter, dw=dw, estimator=est, workers=workers)
    final = smp.solve_all(problem, opt.u, dw, est, workers)
    report = {
        "n_space": spec.n_space, "n_traj": spec.n_traj,
        "coercivity": {"passes": ops["coercivity"].passes, "max_value": ops["coercivity"].max_value,
                       "K1": ops["coercivity"].K1, "C1": ops["coercivity"].C1},
        "parabolicity": ops["parabolicity"],
        "J_zero_control": base.J, "J_optimized": opt.J,
        "improvement": (base.J - opt.J) / abs(base.J) if base.J else 0.0,
        "J_trajectory": [r["J"] for r in opt.history],
        "converged": opt.converged, "residual": opt.residual, "grad_norm": opt.grad_norm,
        "iterations": len(opt.history) - 1,
    }
    if do_check:
        # move from the optimum toward the box centre, an admissible direction
        v = -opt.u.copy()
        v[:problem.grid.i0] = 0.0
        report["gateaux"] = smp.gateaux_check(problem, opt.u, v, dw=dw, estimator=est)
    return report, {"problem": problem, "u": opt.u, "solution": final, "dw": dw, "history": opt.history}


def field_csv(path, problem, solution, spec):
    """Space-time export ``(t, zeta, mean x, std x)`` of the state."""
    g = problem.grid
    z = spec.nodes()
    X = solution.x.x
    with open(path, "w") as fh:
        fh.write("t,zeta,mean_x,std_x\n")
        for i in range(g.i0, g.iT + 1):
            mu, sd = X[i].mean(axis=0), X[i].std(axis=0)
            for j, zj in enumerate(z):
                fh.write(f"{g.time(i):.17g},{zj:.17g},{mu[j]:.17g},{sd[j]:.17g}\n")
