"""Command line entry point.

Subcommands: ``verify``, ``forward``, ``backward``, ``utility``,
``optimize``, ``gradcheck``, ``lq``, ``spde``.  Every run writes its
artifacts plus ``config.json`` (the fully resolved configuration) and
``report.json`` into the output directory.

Exit codes: 0 success, 1 a check failed, 2 invalid input, 3 numerical abort.
Flags may also be given through ``DELAYSMP_CONFIG``, ``DELAYSMP_SEED``,
``DELAYSMP_WORKERS``, ``DELAYSMP_OUT`` and ``DELAYSMP_QUIET``; explicit flags
win over the environment.
"""

import argparse
import math
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import lq_bench, smp_optimizer as smp, spde_demo, verify
from .errors import InvalidInputError, NumericalAbort
from .sdee_forward import solve_sdee

ENV_PREFIX = "DELAYSMP_"
DEFAULT_CONFIG = {"verify": "default", "forward": "default", "backward": "default", "utility": "default",
                  "optimize": "default", "gradcheck": "default", "lq": "lq_nodelay", "spde": "spde"}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return _plain({k: getattr(obj, k) for k in obj.__dataclass_fields__})
    return obj


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return '"nan"'
        if math.isinf(obj):
            return '"inf"' if obj > 0 else '"-inf"'
        text = format(obj, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(obj, str):
        import json
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}{_encode(str(k), indent, level + 1)}: {_encode(v, indent, level + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    return _encode(str(obj), indent, level)


def dumps(obj, indent=2):
    """Deterministic JSON with floats written to 17 significant digits."""
    return _encode(_plain(obj), indent, 0)


def _write(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj) + "\n")


def _control_csv(path, problem, u):
    g = problem.grid
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"u_{j + 1}" for j in range(problem.n_controls)) + "\n")
        for i in range(g.iT + 1):
            fh.write(f"{g.time(i):.17g}," + ",".join(f"{v:.17g}" for v in u[i]) + "\n")


class Context:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = cfg["output"]
        self.seed = cfg["seed"]
        self.workers = cfg["workers"]
        self.quiet = args.quiet
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def say(self, text):
        if not self.quiet:
            print(text)


def _setup(ctx):
    cfg = ctx.cfg
    problem = cfgmod.make_problem(cfg)
    est = cfgmod.make_estimator(cfg)
    u0 = cfgmod.initial_control(cfg, problem)
    dw = problem.increments(cfg["solver"]["n_traj"], ctx.seed)
    return problem, est, u0, dw


def cmd_verify(ctx):
    problem, est, u0, dw = _setup(ctx)
    m, _ = cfgmod.measures(ctx.cfg)
    report = verify.run_suite(ctx.cfg, problem, u0, m=m, workers=ctx.workers)
    report["all_pass"] = all(r["passes"] for r in report.values())
    failing = [k for k in report if k != "all_pass" and not report[k]["passes"]]
    summary = "all checks pass" if not failing else f"first failing check: {failing[0]}"
    return report, (0 if not failing else 1), summary


def cmd_forward(ctx):
    problem, est, u0, dw = _setup(ctx)
    x = solve_sdee(problem.bundle, problem.triple, problem.x0, u0, problem.m, problem.grid, problem.noise,
                   dw=dw, workers=ctx.workers)
    x.to_csv(ctx.path("ensemble.csv"))
    summary = x.summary(problem.triple)
    return {"summary": summary}, 0, f"second moment at T {summary['second_moment_T']:.6g}"


def cmd_utility(ctx):
    problem, est, u0, dw = _setup(ctx)
    sol = smp.evaluate(problem, u0, dw, est, ctx.workers)
    y = sol.utility
    return {"J": sol.J, "y0_spread": y.spread, "diagnostics": y.diagnostics}, 0, f"J {sol.J:.10g}"


def cmd_backward(ctx):
    problem, est, u0, dw = _setup(ctx)
    sol = smp.evaluate(problem, u0, dw, est, ctx.workers)
    smp.solve_k(problem, sol)
    pair = smp.assemble_adjoint(problem, sol, est)
    pair.to_csv(ctx.path("backward.csv"))
    g = problem.grid
    report = {"J": sol.J, "p0_mean": pair.p[g.i0].mean(axis=0), "k_T_mean": float(sol.k[g.iT].mean()),
              "post_T_zero": bool(not np.any(pair.p[g.iT + 1:]) and not np.any(pair.q[g.iT + 1:])),
              "diagnostics": pair.diagnostics}
    _write(ctx.path("estimator.json"), pair.diagnostics)
    return report, 0, f"J {sol.J:.10g}, |p(0)| {np.linalg.norm(report['p0_mean']):.6g}"


def cmd_optimize(ctx):
    problem, est, u0, dw = _setup(ctx)
    o = ctx.cfg["optimizer"]
    hist = open(ctx.path("history.jsonl"), "w")

    def log(rec):
        hist.write(dumps(rec, indent=0).replace("\n", "") + "\n")

    try:
        res = smp.optimize(problem, u0, tol=o["tol"], max_iter=o["max_iter"], dw=dw, estimator=est,
                           gamma0=o["gamma0"], shrink=o["shrink"], slope=o["slope"],
                           n_residual=o["n_residual"], workers=ctx.workers, callback=log)
    finally:
        hist.close()
    _control_csv(ctx.path("control.csv"), problem, res.u)
    report = {"J": res.J, "converged": res.converged, "status": "converged" if res.converged else "not converged",
              "residual": res.residual, "grad_norm": res.grad_norm, "iterations": len(res.history) - 1,
              "message": res.message}
    return report, 0, f"J {res.J:.10g}, residual {res.residual:.3g}, {report['status']}"


def cmd_gradcheck(ctx):
    problem, est, u0, dw = _setup(ctx)
    gc = ctx.cfg["gradcheck"]
    g = problem.grid
    if "direction" in gc:
        v = np.zeros_like(u0)
        v[g.i0:] = np.broadcast_to(np.asarray(gc["direction"], float), v[g.i0:].shape)
    else:
        t = g.times[:g.iT + 1]
        v = np.cos(np.pi * t / g.T)[:, None] + 0.5 + np.zeros_like(u0)
    rep = smp.gateaux_check(problem, u0, v, rhos=gc["rhos"], dw=dw, estimator=est, tol=gc["tol"])
    status = 0 if rep["passes"] else 1
    return rep, status, f"relative errors {', '.join(f'{e:.2e}' for e in rep['relative_errors'])}"


def cmd_lq(ctx):
    cfg = ctx.cfg
    if cfg["problem"]["kind"] != "lq":
        raise InvalidInputError("the lq command needs a problem of kind 'lq'")
    spec = cfgmod.lq_spec(cfg)
    lq = cfg["lq"]
    rep = lq_bench.benchmark(spec, n_traj=cfg["solver"]["n_traj"], seed=ctx.seed, tol=lq["tol"],
                             opt_tol=cfg["optimizer"]["tol"], max_iter=lq["max_iter"],
                             theta=lq["theta"])
    problem = lq_bench.to_problem(spec)
    for name, u in rep.pop("controls").items():
        _control_csv(ctx.path(f"control_{name}.csv"), problem, u)
    runtimes = rep.pop("runtimes")
    ok = True
    if rep["J_riccati"] is not None:
        d = rep["control_L2_distances"]
        ok = rep["J_max_relative_spread"] <= 0.01 and all(v <= 0.02 for v in d.values())
    rep["agreement"] = bool(ok)
    summary = (f"J fixed point {rep['J_fixed_point']:.8g}, gradient {rep['J_gradient']:.8g}, "
               f"Riccati {rep['J_riccati'] if rep['J_riccati'] is None else format(rep['J_riccati'], '.8g')}, "
               f"runtime {sum(runtimes.values()):.2f}s")
    return rep, 0 if ok else 1, summary


def cmd_spde(ctx):
    cfg = ctx.cfg
    if cfg["problem"]["kind"] != "spde":
        raise InvalidInputError("the spde command needs a problem of kind 'spde'")
    spec = cfgmod.spde_spec(cfg)
    o = cfg["optimizer"]
    rep, extra = spde_demo.run_demo(spec, tol=o["tol"], max_iter=o["max_iter"], workers=ctx.workers)
    spde_demo.field_csv(ctx.path("field.csv"), extra["problem"], extra["solution"], spec)
    _control_csv(ctx.path("control.csv"), extra["problem"], extra["u"])
    ok = rep["coercivity"]["passes"] and rep["gateaux"]["passes"]
    return rep, 0 if ok else 1, f"J {rep['J_zero_control']:.6g} -> {rep['J_optimized']:.6g}"


COMMANDS = {"verify": cmd_verify, "forward": cmd_forward, "backward": cmd_backward, "utility": cmd_utility,
            "optimize": cmd_optimize, "gradcheck": cmd_gradcheck, "lq": cmd_lq, "spde": cmd_spde}


def build_parser():
    parser = argparse.ArgumentParser(prog="delaysmp", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config path or the name of a shipped config")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="worker threads for trajectory blocks")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--quiet", action="store_true", default=None, help="suppress the summary line")
    return parser


def _env_defaults(args):
    env = os.environ
    if args.config is None:
        args.config = env.get(ENV_PREFIX + "CONFIG")
    if args.seed is None and env.get(ENV_PREFIX + "SEED"):
        args.seed = int(env[ENV_PREFIX + "SEED"])
    if args.workers is None and env.get(ENV_PREFIX + "WORKERS"):
        args.workers = int(env[ENV_PREFIX + "WORKERS"])
    if args.out is None:
        args.out = env.get(ENV_PREFIX + "OUT")
    if args.quiet is None:
        args.quiet = env.get(ENV_PREFIX + "QUIET", "").lower() in ("1", "true", "yes")
    return args


def main(argv=None):
    try:
        args = _env_defaults(build_parser().parse_args(argv))
    except SystemExit as exc:
        return 2 if exc.code else 0
    started = time.perf_counter()
    try:
        source = args.config or DEFAULT_CONFIG[args.command]
        if source in cfgmod.SHIPPED:
            source = cfgmod.shipped_config_path(source)
        cfg = cfgmod.load_config(source)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise InvalidInputError("--workers must be at least 1")
            cfg["workers"] = args.workers
        if args.out is not None:
            cfg["output"] = args.out
        ctx = Context(args, cfg)
        echo = dict(cfg)
        echo.pop("workers")
        _write(ctx.path("config.json"), echo)
        report, code, summary = COMMANDS[args.command](ctx)
        report = {"command": args.command, "seed": cfg["seed"], **_plain(report)}
        _write(ctx.path("report.json"), report)
        ctx.say(f"{args.command}: {summary} ({time.perf_counter() - started:.2f}s)")
        return code
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; diagnostics {dumps(exc.diagnostics, indent=0)}", file=sys.stderr)
        try:
            with open(os.path.join(cfg["output"], "PARTIAL"), "w") as fh:
                fh.write(str(exc) + "\n")
        except Exception:
            pass
        return 3


if __name__ == "__main__":
    sys.exit(main())
