import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaysmp import smp_optimizer as smp
from delaysmp.absde_backward import CondEstimator, Generator, Terminal
from delaysmp.delay_measures import DelayMeasure, TimeGrid
from delaysmp.errors import PreconditionError
from delaysmp.hilbert_core import GelfandTriple, NoiseModel
from delaysmp.lq_bench import LQSpec, qp_oracle, to_problem
from delaysmp.sdee_forward import CoefficientBundle


def scalar_lq(delay=True, noisy=True, **kw):
    args = dict(A=[[-0.5]], C=[[1.0]], F=[[1.0]], N=[[0.5]], Phi=[[1.0]], T=1.0, dt=0.02, x0=1.0,
                eigenvalues=[1.0 if noisy else 0.0], B=[[[0.3]]], D=[[[0.2]]])
    if delay:
        args.update(delta=0.2, m=DelayMeasure.dirac(0.2), A1=[[0.4]], C1=[[0.3]], B1=[[[0.1]]], D1=[[[0.1]]])
    args.update(kw)
    return LQSpec(**args)


def test_hamiltonian_matches_hand_expansion(rng):
    spec = scalar_lq(G1=0.3, G2=[0.2])
    problem = to_problem(spec)
    P = 7
    x, xd, u, ud, p, k, y, ya = (rng.normal(size=(P, 1)) for _ in range(8))
    q = rng.normal(size=(P, 1, 1))
    z, za = rng.normal(size=(P, 1)), rng.normal(size=(P, 1))
    H = smp.hamiltonian(problem, 0.3, x, xd, y[:, 0], ya[:, 0], z, za, u, ud, p, q, k[:, 0])
    # the operator parts A x and B x enter the adjoint through M and N, not through H
    drift = 0.4 * xd + u + 0.3 * ud
    vol = 0.1 * xd + 0.2 * u + 0.1 * ud
    f = x ** 2 + 0.3 * y + 0.2 * z + 0.5 * u ** 2
    np.testing.assert_allclose(H, (drift * p + vol * q[:, :, 0] - f * k)[:, 0], rtol=1e-13)


@given(st.integers(0, 2 ** 31 - 1))
def test_hamiltonian_partials_by_differences(seed):
    rng = np.random.default_rng(seed)
    problem = to_problem(scalar_lq(G1=0.3, G2=[0.2]))
    P = 3
    args = [0.1, rng.normal(size=(P, 1)), rng.normal(size=(P, 1)), rng.normal(size=P), rng.normal(size=P),
            rng.normal(size=(P, 1)), rng.normal(size=(P, 1)), rng.normal(size=(P, 1)), rng.normal(size=(P, 1))]
    mult = (rng.normal(size=(P, 1)), rng.normal(size=(P, 1, 1)), rng.normal(size=P))
    part = smp.hamiltonian_partials(problem, *args, *mult)
    eps = 1e-6
    for key, pos in (("H_x", 1), ("H_xd", 2), ("H_u", 7), ("H_ud", 8)):
        up, dn = list(args), list(args)
        up[pos] = args[pos] + eps
        dn[pos] = args[pos] - eps
        fd = (smp.hamiltonian(problem, *up, *mult) - smp.hamiltonian(problem, *dn, *mult)) / (2 * eps)
        np.testing.assert_allclose(part[key][:, 0], fd, rtol=1e-6, atol=1e-7)


def test_gradient_vanishes_without_control_dependence():
    grid = TimeGrid(0.02, 1.0, 0.1)
    bundle = CoefficientBundle.linear([[-1.0]], A1=[[0.5]], B=[[[0.2]]], C=[[0.0]], m=1, modes=1)
    gen = Generator(f=lambda t, x, *a: x[:, 0] ** 2, f_x=lambda t, x, *a: 2 * x)
    term = Terminal(h=lambda x, xn: x[:, 0], h_x=lambda x, xn: np.ones_like(x))
    problem = smp.ControlProblem(GelfandTriple.identity(1), NoiseModel([1.0]), grid, bundle, gen, term,
                                 DelayMeasure.dirac(0.1), x0=1.0)
    sol = smp.solve_all(problem, problem.control(lambda t: np.sin(t)), problem.increments(50, 0))
    assert not np.any(sol.G)


def test_scalar_lq_gradient_formula():
    spec = scalar_lq(delay=False, noisy=False)
    problem = to_problem(spec)
    g = problem.grid
    u = problem.control(lambda t: 0.3 * np.cos(t))
    sol = smp.solve_all(problem, u, problem.increments(1, 0))
    free = problem.free
    np.testing.assert_allclose(sol.k[g.i0:g.iT + 1, 0], -1.0)
    expected = 2 * 0.5 * u[free, 0] + 1.0 * sol.adjoint.p[free, 0, 0]
    np.testing.assert_allclose(sol.G[free, 0], expected, rtol=1e-12)
    assert not np.any(sol.G[g.iT:])


def test_gradient_with_noise_includes_q_term():
    spec = scalar_lq(delay=False)
    problem = to_problem(spec)
    u = problem.control(lambda t: 0.2 + t)
    sol = smp.solve_all(problem, u, problem.increments(30, 1))
    free = problem.free
    paths = 2 * 0.5 * u[free, None, 0] + sol.adjoint.p[free, :, 0] + 0.2 * sol.adjoint.q[free, :, 0, 0]
    np.testing.assert_allclose(sol.G[free, 0], paths.mean(axis=1), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("delay", [False, True])
def test_gateaux_quadratic_is_exact_after_extrapolation(delay):
    spec = scalar_lq(delay=delay)
    problem = to_problem(spec)
    t = problem.grid.times[:problem.grid.iT + 1]
    u = problem.control(lambda s: 0.5 * np.sin(3 * s))
    v = np.cos(np.pi * t)[:, None] + 0.5
    rep = smp.gateaux_check(problem, u, v, n_traj=50, seed=4)
    assert rep["extrapolated_error"] <= 1e-6 * max(1.0, abs(rep["predicted"]))
    assert rep["passes"] and rep["decreasing"]
    d = np.diff(rep["quotients"]) / np.diff(rep["rhos"])
    np.testing.assert_allclose(d, d[0], rtol=1e-5)


def test_gateaux_zero_direction():
    problem = to_problem(scalar_lq())
    rep = smp.gateaux_check(problem, problem.control(None), np.zeros((problem.grid.iT + 1, 1)))
    assert rep["predicted"] == 0.0 and rep["passes"]


def test_gateaux_rejects_inadmissible_direction():
    spec = scalar_lq(delay=False)
    problem = to_problem(spec, U=smp.AdmissibleSet("box", lower=-1.0, upper=1.0))
    u = problem.control(lambda t: 0.95)
    with pytest.raises(PreconditionError):
        smp.gateaux_check(problem, u, np.ones_like(u))


def test_terminal_delay_adjoint_jump():
    grid = TimeGrid(0.05, 1.0, 0.2)
    nu = DelayMeasure.dirac(0.2, -0.1)
    bundle = CoefficientBundle.linear([[0.0]], C=[[1.0]], m=1, modes=1)
    sq = Generator(f=lambda t, x, xd, y, ya, z, za, u, ud: u[:, 0] ** 2,
                   f_u=lambda t, x, xd, y, ya, z, za, u, ud: 2 * u)
    c = 1.7
    term = Terminal(h=lambda x, xn: c * xn[:, 0], h_xnu=lambda x, xn: np.full_like(xn, c))
    problem = smp.ControlProblem(GelfandTriple.identity(1), NoiseModel([0.0]), grid, bundle, sq, term,
                                 DelayMeasure.zero(0.2), nu=nu, x0=0.0)
    u = problem.control(lambda t: 0.1)
    sol = smp.solve_all(problem, u, problem.increments(1, 0))
    t = grid.times
    jump_node = grid.index(0.9)
    p = sol.adjoint.p[:, 0, 0]
    np.testing.assert_allclose(p[grid.i0:jump_node], c)
    assert not np.any(p[jump_node:])
    rep = smp.gateaux_check(problem, u, np.sin(t[:grid.iT + 1])[:, None])
    assert rep["extrapolated_error"] <= 1e-9


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["box", "ball", "whole"]))
def test_projection_properties(seed, kind):
    rng = np.random.default_rng(seed)
    U = {"box": smp.AdmissibleSet("box", lower=[-1, 0], upper=[0.5, 2], m=2),
         "ball": smp.AdmissibleSet("ball", center=[0.3, -0.2], radius=0.7, m=2),
         "whole": smp.AdmissibleSet("whole", m=2)}[kind]
    u = 3 * rng.normal(size=(20, 2))
    Pu = U.project(u)
    np.testing.assert_allclose(U.project(Pu), Pu, atol=1e-14)
    assert U.contains(Pu)
    w = U.sample(rng, (20,))
    assert U.contains(w)
    assert np.all(np.sum((u - Pu) * (w - Pu), axis=1) <= 1e-10)


def test_projection_rejects_bad_sets():
    with pytest.raises(PreconditionError):
        smp.AdmissibleSet("star")
    with pytest.raises(PreconditionError):
        smp.AdmissibleSet("box", lower=1.0, upper=0.0)
    with pytest.raises(PreconditionError):
        smp.AdmissibleSet("ball", radius=0.0)


def test_descent_is_monotone_and_reaches_qp():
    spec = scalar_lq(delay=False, noisy=False)
    problem = to_problem(spec)
    res = smp.optimize(problem, tol=1e-7, max_iter=300)
    J = [r["J"] for r in res.history]
    assert all(b <= a + 1e-14 for a, b in zip(J, J[1:]))
    assert res.converged
    J_qp, u_qp = qp_oracle(spec)
    assert res.J == pytest.approx(J_qp, rel=1e-9)
    np.testing.assert_allclose(res.u[problem.free], u_qp, atol=1e-6)


def test_optimize_zero_iterations_reports_not_converged():
    problem = to_problem(scalar_lq())
    res = smp.optimize(problem, tol=1e-8, max_iter=0, n_traj=20)
    assert not res.converged and res.message == "maximum number of iterations reached"
    assert len(res.history) == 1


def test_box_constrained_optimum_satisfies_variational_inequality():
    spec = scalar_lq(delay=True)
    problem = to_problem(spec, U=smp.AdmissibleSet("box", lower=-0.2, upper=0.2))
    res = smp.optimize(problem, tol=1e-6, max_iter=300, n_traj=20)
    assert res.converged and problem.U.contains(res.u[problem.free])
    assert np.any(np.isclose(np.abs(res.u[problem.free]), 0.2))


@pytest.mark.parametrize("factor", [0.5, 3.0])
def test_argmin_invariant_under_cost_scaling(factor):
    spec = scalar_lq(delay=False, noisy=False)
    scaled = scalar_lq(delay=False, noisy=False, F=[[factor]], N=[[0.5 * factor]], Phi=[[factor]])
    J1, u1 = qp_oracle(spec)
    J2, u2 = qp_oracle(scaled)
    np.testing.assert_allclose(u2, u1, rtol=1e-10, atol=1e-13)
    assert J2 == pytest.approx(factor * J1, rel=1e-12)
    res = smp.optimize(to_problem(scaled), tol=1e-8 * factor, max_iter=300)
    np.testing.assert_allclose(res.u[to_problem(scaled).free], u1, atol=1e-6)


def test_sufficiency_and_negative_control():
    spec = scalar_lq(delay=True)
    problem = to_problem(spec)
    dw = problem.increments(40, 3)
    res = smp.optimize(problem, tol=1e-8, max_iter=300, dw=dw)
    ok = smp.sufficiency_check(problem, res.u, n_candidates=30, dw=dw)
    assert ok["passes"] and ok["convexity"]["convex"] and ok["min_gap"] > 0
    # a visibly suboptimal control must be beaten by the true optimum
    bump = problem.control(lambda t: 0.8 * np.exp(-((t - 0.5) / 0.1) ** 2) + res.u[problem.grid.i0, 0])
    bad = smp.sufficiency_check(problem, bump, dw=dw, candidates=[res.u])
    assert not bad["passes"] and bad["violations"] == 1


def test_sufficiency_refuses_nonconvex_problem():
    grid = TimeGrid(0.05, 1.0, 0.0)
    bundle = CoefficientBundle.linear([[0.0]], C=[[1.0]], m=1, modes=1)
    gen = Generator(f=lambda t, x, xd, y, ya, z, za, u, ud: -x[:, 0] ** 2 + u[:, 0] ** 2,
                    f_x=lambda t, x, *a: -2 * x, f_u=lambda t, x, xd, y, ya, z, za, u, ud: 2 * u)
    problem = smp.ControlProblem(GelfandTriple.identity(1), NoiseModel([0.0]), grid, bundle, gen, Terminal(),
                                 DelayMeasure.zero(), x0=1.0)
    with pytest.raises(PreconditionError):
        smp.sufficiency_check(problem, problem.control(None), n_candidates=2)


def test_vi_residual_whole_space_is_gradient_norm():
    problem = to_problem(scalar_lq(delay=False, noisy=False))
    G = np.ones((problem.grid.iT + 1, 1))
    assert smp.vi_residual(problem, problem.control(None), G) == pytest.approx(1.0)


def test_regression_estimator_gradient_close_to_exact():
    spec = scalar_lq(delay=False)
    problem = to_problem(spec)
    dw = problem.increments(2000, 5)
    u = problem.control(lambda t: 0.3)
    exact = smp.solve_all(problem, u, dw)
    reg = smp.solve_all(problem, u, dw, CondEstimator("regression", degree=2))
    diff = problem.l2_distance(exact.G, reg.G) / problem.l2_norm(exact.G)
    assert diff < 0.05
