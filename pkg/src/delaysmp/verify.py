"""Property suite behind ``delaysmp verify``.

Every check returns a JSON-ready dict with a boolean ``passes`` and the
measured quantities.  No timing information enters the dicts, so reports
are byte-identical across runs with the same seed and any worker count.
"""

import hashlib

import numpy as np

from .delay_measures import (DelayMeasure, TimeGrid, check_anticipated_inequality,
                             check_delay_inequality, duality_sides)
from .hilbert_core import (FiniteVariationIntegrator, GelfandTriple, NoiseModel, check_coercivity,
                           ito_energy_check)
from .sdee_forward import solve_sdee


def _random_atomic(rng, grid, n_atoms=3):
    lags = rng.integers(0, grid.n_delay + 1, n_atoms)
    return DelayMeasure(grid.delta, [(-int(j) * grid.dt, float(w)) for j, w in zip(lags, rng.normal(size=n_atoms))])


def _boundary_paths(rng, grid, dim):
    eta = rng.standard_normal((grid.n_nodes, dim))
    eta[:grid.i0] = 0.0
    g = rng.standard_normal((grid.n_nodes, dim))
    g[grid.iT + 1:] = 0.0
    return eta, g


def duality_atomic(n_pairs=100, seed=0, dt=0.01, T=1.0, delta=0.25, m=None, dim=3):
    """Exchange-of-sums identity on random path pairs for atomic measures."""
    rng = np.random.default_rng(seed)
    grid = TimeGrid(dt, T, delta)
    worst = 0.0
    for _ in range(n_pairs):
        meas = m if m is not None else _random_atomic(rng, grid)
        eta, g = _boundary_paths(rng, grid, dim)
        lhs, rhs = duality_sides(eta, g, meas, grid)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return {"passes": worst <= 1e-12, "n_pairs": n_pairs, "max_relative_residual": worst}


def duality_density(levels=3, dt=0.02, T=1.0, delta=0.5, lam=1.0):
    """Trapezoid-rule residual for a density measure on a refinement ladder.

    With the node rule the identity is exact for any weights; the trapezoid
    residual is first order and must roughly halve per level.
    """
    m = DelayMeasure.exponential(delta, lam)
    res_trap, res_node = [], []
    for lev in range(levels):
        grid = TimeGrid(dt / 2 ** lev, T, delta)
        t = grid.times
        eta = np.where(t >= 0, np.cos(t) + 1.0, 0.0)[:, None]
        g = np.where(t <= T + 1e-12, np.exp(-t) + 0.5, 0.0)[:, None]
        lhs, rhs = duality_sides(eta, g, m, grid, rule="trapezoid")
        res_trap.append(lhs - rhs)
        lhs, rhs = duality_sides(eta, g, m, grid, rule="node")
        res_node.append(abs(lhs - rhs) / max(abs(lhs), 1e-300))
    ratios = [abs(b / a) for a, b in zip(res_trap, res_trap[1:])]
    halves = all(0.4 <= r <= 0.6 for r in ratios)
    return {"passes": bool(halves and max(res_node) <= 1e-12), "trapezoid_residuals": res_trap,
            "ratios": ratios, "node_rule_max_relative_residual": max(res_node)}


def _random_measure(rng, delta, dt):
    n_atoms = int(rng.integers(0, 4))
    lags = rng.integers(0, int(round(delta / dt)) + 1, n_atoms)
    atoms = [(-int(j) * dt, float(w)) for j, w in zip(lags, rng.uniform(0, 2, n_atoms))]
    kind = rng.integers(0, 3)
    if kind == 0 and atoms:
        return DelayMeasure(delta, atoms)
    rate = float(rng.uniform(-3, 3))
    scale = float(rng.uniform(0, 2))
    return DelayMeasure(delta, atoms, density=lambda s, r=rate, c=scale: c * np.exp(r * np.asarray(s)))


def delay_inequalities(n_cases=1000, seed=0, m=None, dt=None):
    """Random instances of both delay inequalities; ``m`` (with ``dt``) fixes the measure."""
    rng = np.random.default_rng(seed)
    viol_fwd = viol_bwd = 0
    worst = -np.inf
    dt_fixed = dt
    for _ in range(n_cases):
        dt = float(rng.choice([0.05, 0.02, 0.01])) if dt_fixed is None else dt_fixed
        delta = dt * int(rng.integers(1, 20)) if m is None else m.delta
        T = dt * int(rng.integers(5, 60))
        grid = TimeGrid(dt, T, delta)
        meas = m if m is not None else _random_measure(rng, delta, dt)
        dim = int(rng.integers(1, 4))
        eta = rng.standard_normal((grid.n_nodes, dim)) * rng.uniform(0.1, 3)
        if rng.uniform() < 0.3:
            eta[grid.i0:] = 0.0
        dec = np.cumsum(rng.uniform(0, 1, grid.n_nodes) * (rng.uniform(size=grid.n_nodes) < 0.3))
        weight_down = dec.max() - dec + rng.uniform(0, 1)
        weight_up = dec + rng.uniform(0, 1)
        t_idx = int(rng.integers(grid.i0, grid.iT + 1))
        r1 = check_delay_inequality(eta, meas, weight_down, grid, t_idx)
        r2 = check_anticipated_inequality(eta, meas, weight_up, grid, t_idx)
        viol_fwd += not r1.holds
        viol_bwd += not r2.holds
        worst = max(worst, (r1.lhs - r1.rhs) / max(r1.rhs, 1e-300), (r2.lhs - r2.rhs) / max(r2.rhs, 1e-300))
    return {"passes": viol_fwd == 0 and viol_bwd == 0, "n_cases": n_cases,
            "violations_delay": int(viol_fwd), "violations_anticipated": int(viol_bwd),
            "max_relative_excess": float(worst)}


def energy_identity(n_paths=10000, seed=0):
    """Energy identity on a deterministic and a noisy jump branch, with the correction removed as a negative control."""
    grid = TimeGrid(0.01, 1.0, 0.0)
    triple = GelfandTriple(np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([[3.0, 0.2], [0.2, 2.0]]))
    noise = NoiseModel([1.0, 0.5])
    x0 = np.array([1.0, -0.5])
    v_star = lambda t, h: -h @ np.array([[1.0, 0.2], [0.0, 0.8]]).T + np.sin(t)
    zeta = lambda t, h: 0.5 * h + np.array([0.3, -0.2])
    det_F = FiniteVariationIntegrator(atoms=[(0.37, 0.8)], T=1.0)
    det = ito_energy_check(v_star, zeta, det_F, None, x0, triple, noise, grid)
    det_nc = ito_energy_check(v_star, zeta, det_F, None, x0, triple, noise, grid, include_jump_correction=False)
    q = lambda t, h: np.stack([0.3 * h, 0.2 * np.ones_like(h)], axis=-1)
    sto_F = FiniteVariationIntegrator(atoms=[(0.25, 0.5), (0.7, -0.4)], density=lambda t: 0.3 * np.ones_like(np.asarray(t)), T=1.0)
    sto = ito_energy_check(v_star, zeta, sto_F, q, x0, triple, noise, grid, n_traj=n_paths, seed=seed)
    return {"passes": bool(det.passes and sto.passes and det.detects_missing_correction and not det_nc.passes),
            "deterministic_max_residual": det.max_abs_residual, "deterministic_tolerance": det.tolerance,
            "stochastic_residual_mean": sto.residual_mean, "stochastic_residual_se": sto.residual_se,
            "stochastic_passes": sto.passes, "jump_correction": det.jump_correction,
            "missing_correction_detected": bool(det.detects_missing_correction and not det_nc.passes)}


def coercivity_cases(n=12):
    """Laplacian surrogate passes with ``lam = 0``; a too-large noise operator fails."""
    h = 1.0 / (n + 1)
    K = (np.diag(np.full(n, 2.0)) - np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)) / h
    M_H = h * np.eye(n)
    triple = GelfandTriple(M_H, M_H + K)
    noise = NoiseModel([1.0])
    good = check_coercivity(-K, None, triple, noise, alpha=1.0, lam=0.0)
    # ||B x||_H^2 = 2 ||x||_V^2 with A = 0
    root = np.linalg.cholesky(triple.M_V).T
    B = (np.sqrt(2.0) * np.linalg.solve(np.linalg.cholesky(M_H).T, root))[None]
    bad = [check_coercivity(np.zeros((n, n)), B, triple, noise, alpha=a, lam=l).passes
           for a in (1e-3, 0.5, 1.0) for l in (0.0, 10.0, 1e3)]
    return {"passes": bool(good.passes and not any(bad)), "laplacian_max": good.max_value,
            "laplacian_K1": good.K1, "counterexample_passes": bad}


def forward_reproducibility(problem, u, n_traj, seed, workers):
    """Forward ensembles with one and ``workers`` threads must agree bit for bit."""
    dw = problem.increments(n_traj, seed)
    one = solve_sdee(problem.bundle, problem.triple, problem.x0, u, problem.m, problem.grid,
                     problem.noise, dw=dw, workers=1)
    many = solve_sdee(problem.bundle, problem.triple, problem.x0, u, problem.m, problem.grid,
                      problem.noise, dw=dw, workers=workers)
    digest = hashlib.sha256(np.ascontiguousarray(one.x).tobytes()).hexdigest()
    return {"passes": bool(np.array_equal(one.x, many.x)), "sha256": digest,
            "summary": one.summary(problem.triple)}


def run_suite(cfg, problem, u, m=None, workers=1):
    """All checks; ``m`` is the configured delay measure (used where applicable)."""
    v = cfg["verify"]
    seed = cfg["seed"]
    atomic = m if (m is not None and m.is_atomic() and m.delta > 0) else None
    report = {
        "duality_atomic": duality_atomic(v["n_duality"], seed, m=None),
        "duality_density": duality_density(),
        "delay_inequalities": delay_inequalities(v["n_inequality"], seed),
        "energy_identity": energy_identity(v["n_energy_paths"], seed),
        "coercivity": coercivity_cases(),
        "forward_reproducibility": forward_reproducibility(problem, u, cfg["solver"]["n_traj"], seed, workers),
    }
    if atomic is not None:
        report["duality_configured_measure"] = duality_atomic(v["n_duality"], seed + 1, m=atomic,
                                                              dt=problem.grid.dt, T=problem.grid.T,
                                                              delta=problem.grid.delta)
    if m is not None and m.delta > 0:
        report["inequalities_configured_measure"] = delay_inequalities(min(100, v["n_inequality"]), seed + 2, m=m,
                                                                        dt=problem.grid.dt)
    return report
