"""Delay averages on a grid: moving averages, the exchange-of-sums identity and both delay bounds.

Run with ``python3 demos/delay_measures_tour.py``.
"""

import numpy as np

from delaysmp import DelayMeasure, TimeGrid
from delaysmp.delay_measures import check_anticipated_inequality, check_delay_inequality, duality_sides

grid = TimeGrid(0.01, 1.0, 0.3)
rng = np.random.default_rng(3)

m = DelayMeasure(0.3, [(0.0, 0.5), (-0.1, 0.25), (-0.3, 0.25)])
eta = np.where(grid.times[:, None] >= 0, np.sin(3 * grid.times)[:, None], 0.0)
g = rng.standard_normal((grid.n_nodes, 1))
g[grid.iT + 1:] = 0.0
lhs, rhs = duality_sides(eta, g, m, grid)
print(f"atomic measure: forward pairing {lhs:.15f}, anticipated pairing {rhs:.15f}")

expo = DelayMeasure.exponential(0.3, 2.0)
for dt in (0.02, 0.01, 0.005):
    fine = TimeGrid(dt, 1.0, 0.3)
    t = fine.times
    e = np.where(t >= 0, np.cos(t) + 1.0, 0.0)[:, None]
    h = np.where(t <= 1.0 + 1e-12, np.exp(-t), 0.0)[:, None]
    a, b = duality_sides(e, h, expo, fine, rule="trapezoid")
    print(f"density measure, dt = {dt}: trapezoid residual {a - b:+.3e}")

weight = np.linspace(2.0, 1.0, grid.n_nodes)
fwd = check_delay_inequality(eta, m, weight, grid, grid.iT)
bwd = check_anticipated_inequality(eta, m, weight[::-1], grid, grid.i0)
print(f"delay inequality: {fwd.lhs:.4f} <= {fwd.rhs:.4f} ({fwd.holds})")
print(f"anticipated inequality: {bwd.lhs:.4f} <= {bwd.rhs:.4f} ({bwd.holds})")
