"""Undelayed and delayed linear-quadratic problems solved three ways.

Run with ``python3 demos/lq_three_routes.py``.  For the undelayed problem
every route must land on the Riccati feedback.  With a delay no Riccati
oracle exists, and the fixed point and descent are compared directly.
"""

from delaysmp import LQSpec, benchmark
from delaysmp.delay_measures import DelayMeasure

base = LQSpec(A=[[1.0]], C=[[1.0]], F=[[1.0]], N=[[1.0]], Phi=[[1.0]], dt=0.01, eigenvalues=[0.0])
rep = benchmark(base)
print("undelayed problem")
for key in ("J_fixed_point", "J_gradient", "J_riccati", "J_qp"):
    print(f"  {key:14s} {rep[key]:.8f}")
for key, val in rep["control_L2_distances"].items():
    print(f"  {key:24s} {val:.2e}")

delayed = LQSpec(A=[[1.0]], C=[[1.0]], F=[[1.0]], N=[[1.0]], Phi=[[1.0]], dt=0.02, delta=0.2,
                 m=DelayMeasure.dirac(0.2), A1=[[0.4]], C1=[[0.3]], eigenvalues=[0.0])
rep = benchmark(delayed, opt_tol=1e-6, max_iter=300)
print("delayed problem")
print(f"  J fixed point {rep['J_fixed_point']:.8f}, J gradient {rep['J_gradient']:.8f}")
print(f"  control distance {rep['control_L2_distances']['fixed_point_vs_gradient']:.2e}")
