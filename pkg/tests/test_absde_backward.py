import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaysmp.absde_backward import (CondEstimator, Generator, RunningTerminal, Terminal, absee_stability_probe,
                                     solve_absee, solve_recursive_utility, terminal_delay)
from delaysmp.delay_measures import DelayMeasure, TimeGrid
from delaysmp.errors import PreconditionError
from delaysmp.hilbert_core import FiniteVariationIntegrator, GelfandTriple, NoiseModel, sample_increments
from delaysmp.sdee_forward import CoefficientBundle, solve_sdee

ONE = GelfandTriple.identity(1)
SILENT = NoiseModel([0.0])


def zero_dw(grid, P=1, modes=1):
    return np.zeros((grid.n_T, P, modes))


def test_zero_data_gives_zero():
    grid = TimeGrid(0.01, 1.0, 0.2)
    noise = NoiseModel([1.0, 0.5])
    dw = sample_increments(noise, grid, 10, 1)
    tri = GelfandTriple.identity(2)
    pair = solve_absee(-np.eye(2), np.ones((2, 2, 2)), None, RunningTerminal(np.zeros(2)), DelayMeasure.dirac(0.2),
                       grid, noise, dw, tri)
    assert not np.any(pair.p) and not np.any(pair.q)


@pytest.mark.parametrize("dt", [0.02, 0.01, 0.005])
def test_linear_backward_ode(dt):
    c, xi = 0.8, 1.5
    grid = TimeGrid(dt, 1.0, 0.0)
    g = lambda l, p, q, pa, qa: c * p
    pair = solve_absee(np.zeros((1, 1)), None, g, RunningTerminal(np.array([xi])), DelayMeasure.zero(), grid,
                       SILENT, zero_dw(grid), ONE)
    t = grid.times[grid.i0:grid.iT + 1]
    exact = xi * np.exp(c * (grid.T - t))
    err = np.abs(pair.p[grid.i0:grid.iT + 1, 0, 0] - exact).max()
    assert err <= c ** 2 * xi * np.exp(c) * grid.T * dt
    assert not np.any(pair.q)


def test_implicit_m_term():
    grid = TimeGrid(0.01, 1.0, 0.0)
    a = -3.0
    pair = solve_absee(np.array([[a]]), None, None, RunningTerminal(np.array([1.0])), DelayMeasure.zero(),
                       grid, SILENT, zero_dw(grid), ONE)
    k = np.arange(grid.n_T, -1, -1)
    np.testing.assert_allclose(pair.p[:grid.iT + 1, 0, 0], (1 - grid.dt * a) ** (-k), rtol=1e-13)


@pytest.mark.parametrize("t_star", [0.5, 0.505, 0.99])
def test_single_atom_running_terminal(t_star):
    grid = TimeGrid(0.01, 1.0, 0.1)
    zeta_star, jump = np.array([2.0, -1.0]), 0.7
    F = FiniteVariationIntegrator(atoms=[(t_star, jump)], T=1.0)
    zeta = np.broadcast_to(zeta_star, (grid.n_nodes, 1, 2))
    pair = solve_absee(np.zeros((2, 2)), None, None, RunningTerminal(np.zeros(2), zeta, F), DelayMeasure.zero(0.1),
                       grid, SILENT, zero_dw(grid), GelfandTriple.identity(2))
    t = grid.times
    before = (t < t_star - 1e-12) & (t >= 0)
    np.testing.assert_array_equal(pair.p[before, 0], np.broadcast_to(jump * zeta_star, (before.sum(), 2)))
    assert not np.any(pair.p[t >= t_star - 1e-12])


def test_step_mass_array_terminal():
    grid = TimeGrid(0.1, 1.0, 0.0)
    masses = np.zeros(grid.n_T)
    masses[3] = 2.0
    pair = solve_absee(np.zeros((1, 1)), None, None, RunningTerminal(np.zeros(1), np.ones((grid.n_nodes, 1, 1)),
                                                                     masses),
                       DelayMeasure.zero(), grid, SILENT, zero_dw(grid), ONE)
    np.testing.assert_array_equal(pair.p[:4, 0, 0], 2.0)
    assert not np.any(pair.p[4:])
    with pytest.raises(PreconditionError):
        solve_absee(np.zeros((1, 1)), None, None, RunningTerminal(np.zeros(1), None, np.zeros(3)),
                    DelayMeasure.zero(), grid, SILENT, zero_dw(grid), ONE)


def test_anticipated_generator_matches_hand_recursion():
    grid = TimeGrid(0.05, 1.0, 0.2)
    c = 0.6
    m = DelayMeasure(0.2, [(-0.2, 1.0), (0.0, 0.5)])
    g = lambda l, p, q, pa, qa: c * pa
    pair = solve_absee(np.zeros((1, 1)), None, g, RunningTerminal(np.array([1.0])), m, grid, SILENT,
                       zero_dw(grid), ONE)
    ref = np.zeros(grid.n_nodes)
    ref[grid.iT] = 1.0
    lag = grid.n_delay
    for i in range(grid.iT - 1, grid.i0 - 1, -1):
        ref[i] = ref[i + 1] + grid.dt * c * (ref[i + 1 + lag] + 0.5 * ref[i + 1])
    np.testing.assert_allclose(pair.p[:, 0, 0], ref, rtol=1e-13)


def test_zero_extension_after_horizon():
    grid = TimeGrid(0.01, 1.0, 0.3)
    noise = NoiseModel([1.0])
    dw = sample_increments(noise, grid, 20, 0)
    g = lambda l, p, q, pa, qa: 0.5 * pa + np.sin(p)
    pair = solve_absee(-np.eye(1), np.array([[[0.3]]]), g, RunningTerminal(np.ones(1)), DelayMeasure.dirac(0.3),
                       grid, noise, dw, ONE)
    assert not np.any(pair.p[grid.iT + 1:]) and not np.any(pair.q[grid.iT + 1:])


def brownian_features(grid, dw):
    W = np.zeros((grid.n_nodes, dw.shape[1], dw.shape[2]))
    W[grid.i0 + 1:grid.iT + 1] = np.cumsum(dw, axis=0)
    return W


def test_regression_recovers_martingale_representation():
    grid = TimeGrid(0.05, 1.0, 0.0)
    noise = NoiseModel([1.0])
    dw = sample_increments(noise, grid, 20000, 4)
    W = brownian_features(grid, dw)
    est = CondEstimator("regression", degree=2)
    # p(T) = W(T)^2 - T  has p(t) = W(t)^2 - t and q(t) = 2 W(t)
    xi = W[grid.iT] ** 2 - grid.T
    pair = solve_absee(np.zeros((1, 1)), None, None, RunningTerminal(xi), DelayMeasure.zero(), grid, noise, dw,
                       ONE, est, features=W)
    i = grid.index(0.5)
    err_p = pair.p[i, :, 0] - (W[i, :, 0] ** 2 - 0.5)
    err_q = pair.q[i, :, 0, 0] - 2 * W[i, :, 0]
    se = xi.std() / np.sqrt(xi.size)
    assert np.sqrt(np.mean(err_p ** 2)) < 5 * se
    assert np.sqrt(np.mean(err_q ** 2)) < 5 * se / np.sqrt(grid.dt)
    assert est.diagnostics()["n_fits"] == grid.n_T


def test_martingale_increment_consistency():
    grid = TimeGrid(0.05, 1.0, 0.0)
    noise = NoiseModel([1.0])
    dw = sample_increments(noise, grid, 5000, 8)
    W = brownian_features(grid, dw)
    est = CondEstimator("regression", degree=2)
    xi = np.sin(W[grid.iT])
    pair = solve_absee(np.zeros((1, 1)), None, None, RunningTerminal(xi), DelayMeasure.zero(), grid, noise, dw,
                       ONE, est, features=W)
    for i in (grid.i0 + 3, grid.index(0.5), grid.iT - 1):
        d = pair.p[i, :, 0] - pair.p[i + 1, :, 0]
        assert abs(d.mean()) <= 4 * d.std(ddof=1) / np.sqrt(d.size)


def linear_forward(grid, noise, n_traj, seed):
    bundle = CoefficientBundle.linear([[-0.5]], B=[[[0.3]]], sigma0=[[0.2]], m=1, modes=1)
    dw = sample_increments(noise, grid, n_traj, seed)
    return solve_sdee(bundle, ONE, 1.0, None, DelayMeasure.zero(grid.delta), grid, noise, dw=dw)


def test_exact_linear_agrees_with_regression_in_mean():
    grid = TimeGrid(0.02, 1.0, 0.0)
    noise = NoiseModel([1.0])
    x = linear_forward(grid, noise, 4000, 2)
    feats = np.zeros((grid.n_nodes, x.n_traj, 1))
    feats[:grid.iT + 1] = x.x
    xi = 2.0 * x.x[grid.iT]
    exact = solve_absee(np.array([[-0.5]]), np.array([[[0.3]]]), None, RunningTerminal(xi), DelayMeasure.zero(),
                        grid, noise, x.dw, ONE)
    reg = solve_absee(np.array([[-0.5]]), np.array([[[0.3]]]), None, RunningTerminal(xi), DelayMeasure.zero(),
                      grid, noise, x.dw, ONE, CondEstimator("regression", degree=1), features=feats)
    p0_exact, p0_reg = exact.p[grid.i0].mean(), reg.p[grid.i0].mean()
    se = exact.p[grid.i0].std(ddof=1) / np.sqrt(x.n_traj)
    assert abs(p0_exact - p0_reg) <= 4 * se + 1e-3
    assert reg.p[grid.i0].std() < 1e-8


def test_utility_trivial_cases():
    grid = TimeGrid(0.01, 1.0, 0.2)
    bundle = CoefficientBundle.linear([[0.0]], A1=[[0.5]], m=1, modes=1)
    x = solve_sdee(bundle, ONE, 1.0, None, DelayMeasure.dirac(0.2), grid, SILENT)
    u = np.zeros((grid.iT + 1, 1))
    pair, J = solve_recursive_utility(Generator(), Terminal(h=lambda x, xn: 3.0 * x[:, 0]), x, u,
                                      DelayMeasure.dirac(0.2), None, grid, SILENT)
    assert J == 3.0 * x.x[grid.iT, 0, 0]
    pair, J = solve_recursive_utility(Generator(f=lambda *a: 1.0), Terminal(), x, u, DelayMeasure.dirac(0.2), None,
                                      grid, SILENT)
    t = grid.times[grid.i0:grid.iT + 1]
    np.testing.assert_allclose(pair.y[grid.i0:grid.iT + 1, 0], grid.T - t, atol=1e-12)
    assert J == pytest.approx(grid.T, abs=1e-12)
    assert not np.any(pair.z)


def test_utility_linear_in_y():
    errs = []
    for dt in (0.02, 0.01):
        grid = TimeGrid(dt, 1.0, 0.0)
        x = solve_sdee(CoefficientBundle(n=1, m=1, modes=1), ONE, 0.0, None, DelayMeasure.zero(), grid, SILENT)
        f = Generator(f=lambda t, x, xd, y, ya, z, za, u, ud: y)
        _, J = solve_recursive_utility(f, Terminal(h=lambda x, xn: 1.0), x, np.zeros((grid.iT + 1, 1)),
                                       DelayMeasure.zero(), None, grid, SILENT)
        errs.append(abs(J - np.e))
        assert errs[-1] <= np.e * dt
    assert 0.45 <= errs[1] / errs[0] <= 0.55


def test_utility_zero_after_horizon_and_terminal_delay():
    grid = TimeGrid(0.01, 1.0, 0.2)
    noise = NoiseModel([1.0])
    x = linear_forward(grid, noise, 5, 0)
    nu = DelayMeasure.dirac(0.2, -0.1)
    xn = terminal_delay(x, nu, grid)
    np.testing.assert_array_equal(xn, x.x[grid.index(0.9)])
    h = Terminal(h=lambda x, xn: x[:, 0] * xn[:, 0])
    pair, _ = solve_recursive_utility(Generator(f=lambda t, x, xd, y, ya, z, za, u, ud: 0.1 * ya + z[:, 0]), h, x,
                                      np.zeros((grid.iT + 1, 1)), DelayMeasure.dirac(0.2), nu, grid, noise)
    assert not np.any(pair.y[grid.iT + 1:]) and not np.any(pair.z[grid.iT + 1:])
    np.testing.assert_array_equal(pair.y[grid.iT], x.x[grid.iT, :, 0] * xn[:, 0])


def test_stability_probe_xi_ladder():
    grid = TimeGrid(0.02, 1.0, 0.1)
    noise = NoiseModel([1.0])
    dw = sample_increments(noise, grid, 100, 3)
    g = lambda l, p, q, pa, qa: 0.3 * pa
    base = RunningTerminal(np.ones(1))
    rep = absee_stability_probe(np.array([[-1.0]]), np.array([[[0.2]]]), g, base, RunningTerminal(np.ones(1)),
                                [1e-1, 1e-2, 1e-3], DelayMeasure.dirac(0.1), grid, noise, dw, ONE)
    assert rep["finite"] and rep["spread"] <= 0.05
    zero = absee_stability_probe(np.array([[-1.0]]), None, g, base, RunningTerminal(np.zeros(1)), [1.0],
                                 DelayMeasure.dirac(0.1), grid, noise, dw, ONE)
    assert zero["numerators"] == [0.0]


def test_stability_probe_zeta_jump():
    grid = TimeGrid(0.1, 1.0, 0.0)
    F = FiniteVariationIntegrator(atoms=[(0.5, 0.5)], T=1.0)
    base = RunningTerminal(np.zeros(1), np.zeros((grid.n_nodes, 1, 1)), F)
    direction = RunningTerminal(np.zeros(1), np.ones((grid.n_nodes, 1, 1)))
    rep = absee_stability_probe(np.zeros((1, 1)), None, None, base, direction, [1.0, 0.1], DelayMeasure.zero(), grid,
                                SILENT, zero_dw(grid), ONE)
    # sup |p - p'|^2 = (0.5 eps)^2 while the data energy is 0.5 eps^2
    np.testing.assert_allclose(rep["ratios"], [0.5, 0.5], rtol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_regression_reproduces_polynomials(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(300, 2))
    target = 1.0 + z[:, 0] - 0.5 * z[:, 0] * z[:, 1] + 2 * z[:, 1] ** 2
    proj = CondEstimator("regression", degree=2, ridge=1e-12).fit(z)
    np.testing.assert_allclose(proj(target), target, atol=1e-6)


def test_unknown_estimator_mode():
    with pytest.raises(PreconditionError):
        CondEstimator("neural")


def test_export(tmp_path):
    grid = TimeGrid(0.1, 0.3, 0.1)
    pair = solve_absee(np.zeros((1, 1)), None, None, RunningTerminal(np.ones(1)), DelayMeasure.zero(0.1), grid,
                       SILENT, zero_dw(grid, 2), ONE)
    path = tmp_path / "bw.csv"
    pair.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "traj,t,p_1,q_1_1"
    assert len(lines) == 1 + 2 * (grid.n_nodes - grid.i0)
