"""Experiment configuration files and the builders that turn them into solver objects."""

import copy
import json
import re
from importlib import resources

import jsonschema
import numpy as np

from .absde_backward import CondEstimator, Generator, Terminal, constant
from .delay_measures import DelayMeasure, TimeGrid
from .errors import ConfigError, PreconditionError
from .hilbert_core import GelfandTriple, NoiseModel
from .sdee_forward import CoefficientBundle
from . import lq_bench, smp_optimizer as smp, spde_demo

DEFAULTS = {
    "grid": {"dt": 0.01, "T": 1.0, "delta": 0.2},
    "triple": {"M_H": "identity", "M_V": "identity"},
    "noise": {"modes": 1, "eigenvalues": "identity"},
    "solver": {"estimator": "exact-linear", "degree": 2, "ridge": 1e-8, "n_traj": 64},
    "optimizer": {"tol": 1e-6, "max_iter": 100, "gamma0": 1.0, "shrink": 0.5, "slope": 1e-4,
                  "n_residual": 200},
    "gradcheck": {"rhos": [1e-1, 1e-2, 1e-3], "tol": 1e-2},
    "verify": {"n_duality": 100, "n_inequality": 1000, "n_energy_paths": 10000},
    "lq": {"tol": 1e-8, "max_iter": 500, "theta": 0.5},
    "control": {"kind": "zero"},
    "seed": 0,
    "workers": 1,
    "output": "out",
}

SHIPPED = ("default", "lq_nodelay", "lq_2d", "lq_delay", "spde")


def schema():
    text = resources.files("delaysmp").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def shipped_config_path(name):
    if name not in SHIPPED:
        raise ConfigError(f"no shipped config named {name!r}; choose from {', '.join(SHIPPED)}")
    return str(resources.files("delaysmp").joinpath(f"configs/{name}.json"))


def _line_of(text, path):
    """Best effort line number of the last key of a JSON path inside ``text``."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys or text is None:
        return None
    pos = 0
    for key in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source):
    """Parse and validate a configuration, filling in defaults.

    ``source`` is a path, a JSON string starting with ``{`` or a dict.
    Errors are :class:`ConfigError` carrying a line number where possible.
    """
    text = None
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        src = str(source)
        if src.lstrip().startswith("{"):
            text = src
            origin = "<string>"
        else:
            origin = src
            try:
                with open(src) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {src!r}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{origin}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line = _line_of(text, path)
        where = "/".join(str(p) for p in path) or "<root>"
        prefix = f"line {line}: " if line else ""
        raise ConfigError(f"{prefix}{where}: {err.message}")
    cfg = _merge(DEFAULTS, raw)
    cfg.setdefault("problem", {"kind": "custom"})
    validate_semantics(cfg)
    return cfg


def validate_semantics(cfg):
    """Cross-field checks run before any computation."""
    g = cfg["grid"]
    make_grid(cfg)
    for name in ("m", "nu"):
        mc = cfg.get("measures", {}).get(name)
        if mc is None:
            continue
        m = make_measure(mc)
        m.lag_weights(g["dt"])
        if m.delta > g.get("delta", 0.0) + 1e-12:
            raise ConfigError(f"measures/{name}: delta {m.delta} exceeds grid delta {g.get('delta', 0.0)}")
    U = cfg["problem"].get("U")
    if U and U["kind"] == "box":
        lo, hi = np.asarray(U.get("lower", -np.inf), float), np.asarray(U.get("upper", np.inf), float)
        if np.any(lo > hi):
            raise ConfigError("problem/U: box lower bound exceeds upper bound")
    if U and U["kind"] == "ball" and "radius" not in U:
        raise ConfigError("problem/U: a ball needs a radius")


def make_grid(cfg):
    g = cfg["grid"]
    return TimeGrid(g["dt"], g["T"], g.get("delta", 0.0))


def make_measure(mc):
    if mc is None:
        return None
    if mc["type"] == "zero":
        return DelayMeasure.zero(mc["delta"])
    return DelayMeasure.from_config(mc)


def measures(cfg):
    ms = cfg.get("measures", {})
    delta = cfg["grid"].get("delta", 0.0)
    m = make_measure(ms.get("m")) or DelayMeasure.zero(delta)
    return m, make_measure(ms.get("nu"))


def _load_matrix(spec, n):
    if spec == "identity":
        return np.eye(n)
    if isinstance(spec, str):
        try:
            mat = np.loadtxt(spec, delimiter=",", ndmin=2)
        except OSError as exc:
            raise ConfigError(f"cannot read matrix file {spec!r}: {exc}") from exc
        return mat
    return np.atleast_2d(np.asarray(spec, float))


def make_triple(cfg, n):
    t = cfg["triple"]
    n = t.get("n", n)
    return GelfandTriple(_load_matrix(t.get("M_H", "identity"), n), _load_matrix(t.get("M_V", "identity"), n))


def make_noise(cfg):
    nz = cfg["noise"]
    return NoiseModel.from_spec(nz.get("modes", 1), nz.get("eigenvalues", "identity"))


def make_estimator(cfg):
    s = cfg["solver"]
    return CondEstimator(s["estimator"], s.get("degree", 2), s.get("ridge", 1e-8))


def _arr(value, shape, name):
    if value is None:
        return np.zeros(shape)
    a = np.asarray(value, float)
    if a.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
        return float(a) * np.eye(shape[0])
    try:
        return np.broadcast_to(a.reshape(shape) if a.size == np.prod(shape) else a, shape).copy()
    except ValueError as exc:
        raise ConfigError(f"problem/{name}: cannot shape {a.shape} as {shape}") from exc


def lq_spec(cfg):
    """:class:`~delaysmp.lq_bench.LQSpec` from an ``lq`` problem section."""
    p = cfg["problem"]
    g = cfg["grid"]
    noise = make_noise(cfg)
    n = np.atleast_2d(np.asarray(p["A"], float)).shape[0]
    mdim = np.asarray(p.get("C", np.zeros(n)), float).reshape(n, -1).shape[1]
    modes = noise.modes
    m, _ = measures(cfg)
    return lq_bench.LQSpec(
        A=_arr(p["A"], (n, n), "A"), C=_arr(p.get("C"), (n, mdim), "C"),
        F=_arr(p.get("F"), (n, n), "F"), N=_arr(p.get("N", 1.0), (mdim, mdim), "N"),
        Phi=_arr(p.get("Phi"), (n, n), "Phi"), T=g["T"], dt=g["dt"], delta=g.get("delta", 0.0), m=m,
        A1=_arr(p.get("A1"), (n, n), "A1"), C1=_arr(p.get("C1"), (n, mdim), "C1"),
        B=_arr(p.get("B"), (modes, n, n), "B"), B1=_arr(p.get("B1"), (modes, n, n), "B1"),
        D=_arr(p.get("D"), (modes, n, mdim), "D"), D1=_arr(p.get("D1"), (modes, n, mdim), "D1"),
        G1=float(p.get("G1", 0.0)), G2=_arr(p.get("G2"), (modes,), "G2"),
        x0=_arr(p.get("x0", 1.0), (n,), "x0"), eigenvalues=noise.eigenvalues)


def spde_spec(cfg):
    p = dict(cfg["problem"].get("spde", {}))
    g = cfg["grid"]
    p.setdefault("dt", g["dt"])
    p.setdefault("T", g["T"])
    p.setdefault("delta", g.get("delta", 0.1))
    p.setdefault("n_traj", cfg["solver"]["n_traj"])
    p.setdefault("seed", cfg["seed"])
    try:
        return spde_demo.SPDESpec(**p)
    except TypeError as exc:
        raise ConfigError(f"problem/spde: {exc}") from exc


def custom_problem(cfg):
    """Linear dynamics with an optional ``kappa tanh(x_d)`` drift and quadratic costs."""
    p = cfg["problem"]
    noise = make_noise(cfg)
    modes = noise.modes
    A = np.atleast_2d(np.asarray(p.get("A", [[0.0]]), float))
    n = A.shape[0]
    mdim = np.asarray(p.get("C", np.ones(n)), float).reshape(n, -1).shape[1]
    triple = make_triple(cfg, n)
    grid = make_grid(cfg)
    m, nu = measures(cfg)
    lin = CoefficientBundle.linear(
        A, B=_arr(p.get("B"), (modes, n, n), "B"), A1=_arr(p.get("A1"), (n, n), "A1"),
        C=_arr(p.get("C", np.ones((n, mdim))), (n, mdim), "C"), C1=_arr(p.get("C1"), (n, mdim), "C1"),
        B1=_arr(p.get("B1"), (modes, n, n), "B1"), D=_arr(p.get("D"), (modes, n, mdim), "D"),
        D1=_arr(p.get("D1"), (modes, n, mdim), "D1"), sigma0=_arr(p.get("sigma0"), (n, modes), "sigma0"),
        m=mdim, modes=modes)
    kappa = float(p.get("kappa", 0.0))
    if kappa:
        b_lin, bxd_lin = lin.b, lin.b_xd
        lin.b = lambda t, x, xd, u, ud: b_lin(t, x, xd, u, ud) + kappa * np.tanh(xd)
        lin.b_xd = lambda t, x, xd, u, ud: (bxd_lin(t, x, xd, u, ud)
                                            + (kappa / np.cosh(xd) ** 2)[:, :, None] * np.eye(n)[None])
        lin.check = True
        lin.derivative_error = lin.check_derivatives()
    Fm = _arr(p.get("F"), (n, n), "F")
    Nm = _arr(p.get("N", 1.0), (mdim, mdim), "N")
    Phi = _arr(p.get("Phi"), (n, n), "Phi")
    Pnu = _arr(p.get("Phi_nu"), (n, n), "Phi_nu")
    G1 = float(p.get("G1", 0.0))
    G2 = _arr(p.get("G2"), (modes,), "G2")
    quad = lambda x, M: np.einsum("pi,ij,pj->p", x, M, x)
    gen = Generator(
        f=lambda t, x, xd, y, ya, z, za, u, ud: quad(x, Fm) + G1 * y + z @ G2 + quad(u, Nm),
        f_x=lambda t, x, *a: x @ (Fm + Fm.T), f_y=constant(G1) if G1 else None,
        f_z=constant(G2) if np.any(G2) else None,
        f_u=lambda t, x, xd, y, ya, z, za, u, ud: u @ (Nm + Nm.T))
    term = Terminal(h=lambda x, xn: quad(x, Phi) + quad(xn, Pnu), h_x=lambda x, xn: x @ (Phi + Phi.T),
                    h_xnu=lambda x, xn: xn @ (Pnu + Pnu.T))
    U = smp.AdmissibleSet.from_config(p.get("U"), mdim)
    return smp.ControlProblem(triple, noise, grid, lin, gen, term, m, nu=nu,
                              x0=_arr(p.get("x0", 1.0), (n,), "x0"), U=U)


def make_problem(cfg):
    """``ControlProblem`` for any problem kind."""
    kind = cfg["problem"]["kind"]
    try:
        if kind == "lq":
            spec = lq_spec(cfg)
            return lq_bench.to_problem(spec, smp.AdmissibleSet.from_config(cfg["problem"].get("U"), spec.n_controls))
        if kind == "spde":
            return spde_demo.build_problem(spde_spec(cfg))[0]
        return custom_problem(cfg)
    except PreconditionError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"problem: {exc}") from exc


def initial_control(cfg, problem):
    """Starting control from the ``control`` section, projected onto ``U``."""
    c = cfg.get("control", {"kind": "zero"})
    g = problem.grid
    mdim = problem.n_controls
    if c["kind"] == "zero":
        vals = np.zeros((g.n_T + 1, mdim))
    elif c["kind"] == "constant":
        vals = np.broadcast_to(np.asarray(c.get("value", 0.0), float), (g.n_T + 1, mdim)).copy()
    else:
        t = g.times[g.i0:g.iT + 1]
        amp = np.broadcast_to(np.asarray(c.get("value", 1.0), float), (mdim,))
        vals = np.sin(np.pi * float(c.get("frequency", 1.0)) * t / g.T)[:, None] * amp
    u = problem.control(vals)
    u[g.i0:] = problem.U.project(u[g.i0:])
    return u
