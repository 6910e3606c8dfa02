"""Stochastic maximum principle toolkit for delayed evolution equations.

Modules: ``delay_measures`` (grids and delay measures), ``hilbert_core``
(finite-dimensional Gelfand triples and noise), ``sdee_forward`` and
``absde_backward`` (forward and anticipated backward solvers),
``smp_optimizer`` (gradient, Gateaux check, projected gradient descent),
``lq_bench`` and ``spde_demo`` (applications) and ``cli``.
"""

from .errors import (AlignmentError, ConfigError, DelaySMPError, InvalidInputError, NumericalAbort,
                     PreconditionError)
from .delay_measures import DelayMeasure, TimeGrid, lagged_sum
from .hilbert_core import GelfandTriple, NoiseModel, check_coercivity, hs_norm, sample_increments
from .sdee_forward import CoefficientBundle, PathEnsemble, solve_sdee
from .absde_backward import (CondEstimator, Generator, RunningTerminal, Terminal, solve_absee,
                             solve_recursive_utility)
from .smp_optimizer import (AdmissibleSet, ControlProblem, gateaux_check, gradient, optimize,
                            sufficiency_check, vi_residual)
from .lq_bench import LQSpec, benchmark, lq_fixed_point, riccati_oracle
from .spde_demo import SPDESpec, build_problem as build_spde_problem, run_demo

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "ConfigError", "DelaySMPError", "InvalidInputError", "NumericalAbort",
    "PreconditionError", "DelayMeasure", "TimeGrid", "lagged_sum", "GelfandTriple", "NoiseModel",
    "check_coercivity", "hs_norm", "sample_increments", "CoefficientBundle", "PathEnsemble", "solve_sdee",
    "CondEstimator", "Generator", "RunningTerminal", "Terminal", "solve_absee", "solve_recursive_utility",
    "AdmissibleSet", "ControlProblem", "gateaux_check", "gradient", "optimize", "sufficiency_check",
    "vi_residual", "LQSpec", "benchmark", "lq_fixed_point", "riccati_oracle", "SPDESpec",
    "build_spde_problem", "run_demo",
]
