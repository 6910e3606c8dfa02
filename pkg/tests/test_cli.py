import json
import os

import pytest

from delaysmp import cli
from delaysmp.config import load_config, shipped_config_path
from delaysmp.errors import ConfigError

FAST_SPDE = {"problem": {"kind": "spde", "spde": {"n_space": 8}}, "grid": {"dt": 0.02, "T": 1.0, "delta": 0.1},
             "solver": {"n_traj": 8}, "optimizer": {"tol": 1e-4, "max_iter": 15}}


def write_cfg(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj, indent=2))
    return str(path)


def shipped_with(tmp_path, name, **sections):
    cfg = json.loads(open(shipped_config_path(name)).read())
    for key, val in sections.items():
        cfg[key] = {**cfg.get(key, {}), **val} if isinstance(val, dict) else val
    return write_cfg(tmp_path, cfg)


def run(args, out):
    return cli.main(list(args) + ["--out", str(out), "--quiet"])


def read_report(out):
    return json.loads((out / "report.json").read_text())


def test_dumps_is_deterministic_and_fixed_precision():
    text = cli.dumps({"a": 0.1, "b": 2.0, "c": [1, float("nan")], "d": {"x": True}})
    assert '"a": 0.10000000000000001' in text
    assert '"b": 2.0' in text and '"nan"' in text
    assert json.loads(text)["b"] == 2.0


def test_config_defaults_and_validation(tmp_path):
    cfg = load_config({"grid": {"dt": 0.05, "T": 1.0}})
    assert cfg["seed"] == 0 and cfg["problem"]["kind"] == "custom"
    bad = write_cfg(tmp_path, '{\n  "grid": {\n    "dt": -1.0,\n    "T": 1.0\n  }\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(bad)
    with pytest.raises(ConfigError, match="line 2"):
        load_config(write_cfg(tmp_path, '{\n  "grid": {"dt": 0.1,}\n}', "broken.json"))
    with pytest.raises(ConfigError, match="unknown"):
        load_config({"unknown": 1})
    with pytest.raises(ConfigError, match="exceeds grid delta"):
        load_config({"grid": {"dt": 0.1, "T": 1.0, "delta": 0.1},
                     "measures": {"m": {"type": "dirac", "delta": 0.2, "atoms": [[-0.2, 1.0]]}}})
    with pytest.raises(ConfigError, match="box lower"):
        load_config({"problem": {"kind": "custom", "U": {"kind": "box", "lower": 1.0, "upper": 0.0}}})


def test_shipped_configs_load():
    for name in ("default", "lq_nodelay", "lq_2d", "lq_delay", "spde"):
        load_config(shipped_config_path(name))


@pytest.mark.parametrize("case", ["signed", "misaligned", "missing", "negative_dt"])
def test_invalid_input_exit_code(tmp_path, case):
    if case == "signed":
        path = shipped_with(tmp_path, "default", measures={
            "m": {"type": "multipoint", "delta": 0.2, "atoms": [[0.0, 0.5], [-0.1, -0.3]]},
            "nu": {"type": "dirac", "delta": 0.1, "atoms": [[-0.1, 1.0]]}})
    elif case == "misaligned":
        path = shipped_with(tmp_path, "default", measures={
            "m": {"type": "dirac", "delta": 0.2, "atoms": [[-0.105, 1.0]]}})
    elif case == "missing":
        path = str(tmp_path / "nope.json")
    else:
        path = write_cfg(tmp_path, {"grid": {"dt": -1.0, "T": 1.0}})
    assert run(["verify", "--config", path], tmp_path / "out") == 2


def test_bad_command_and_workers(tmp_path):
    assert cli.main(["frobnicate"]) == 2
    assert run(["forward", "--workers", "0"], tmp_path / "out") == 2


def test_verify_default_and_determinism(tmp_path):
    reports = []
    for workers in ("1", "4"):
        out = tmp_path / f"w{workers}"
        assert run(["verify", "--workers", workers], out) == 0
        reports.append((out / "report.json").read_bytes())
        rep = read_report(out)
        assert rep["all_pass"] and rep["command"] == "verify"
        echo = json.loads((out / "config.json").read_text())
        assert "workers" not in echo and echo["seed"] == 0
    assert reports[0] == reports[1]


def test_verify_failure_names_first_check(tmp_path, capsys):
    # a seed-independent failing check is forced by patching the coercivity case
    from delaysmp import verify
    orig = verify.coercivity_cases
    verify.coercivity_cases = lambda: {"passes": False}
    try:
        code = cli.main(["verify", "--out", str(tmp_path)])
    finally:
        verify.coercivity_cases = orig
    assert code == 1
    assert "first failing check: coercivity" in capsys.readouterr().out


def test_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("DELAYSMP_SEED", "7")
    monkeypatch.setenv("DELAYSMP_OUT", str(tmp_path / "env"))
    monkeypatch.setenv("DELAYSMP_QUIET", "1")
    assert cli.main(["utility"]) == 0
    assert read_report(tmp_path / "env")["seed"] == 7
    assert cli.main(["utility", "--seed", "3"]) == 0
    assert read_report(tmp_path / "env")["seed"] == 3


@pytest.mark.parametrize("command,files", [
    ("forward", ["ensemble.csv"]),
    ("backward", ["backward.csv", "estimator.json"]),
    ("utility", []),
    ("gradcheck", []),
])
def test_pipeline_artifacts(tmp_path, command, files):
    out = tmp_path / command
    assert run([command], out) == 0
    for name in files + ["config.json", "report.json"]:
        assert (out / name).stat().st_size > 0
    rep = read_report(out)
    if command == "gradcheck":
        assert rep["decreasing"] and rep["relative_errors"][-1] <= 1e-2
    if command == "backward":
        assert rep["post_T_zero"]


def test_optimize_with_zero_iterations(tmp_path):
    path = shipped_with(tmp_path, "default", optimizer={"tol": 1e-5, "max_iter": 0})
    out = tmp_path / "opt"
    assert run(["optimize", "--config", path], out) == 0
    rep = read_report(out)
    assert rep["status"] == "not converged" and rep["iterations"] == 0
    u_run = (out / "control.csv").read_text().splitlines()
    assert run(["utility", "--config", path], tmp_path / "u") == 0
    assert rep["J"] == read_report(tmp_path / "u")["J"]
    assert u_run[0] == "t,u_1"
    assert len((out / "history.jsonl").read_text().splitlines()) == 1


def test_optimize_converges_on_lq(tmp_path):
    out = tmp_path / "opt"
    assert run(["optimize", "--config", "lq_nodelay"], out) == 0
    rep = read_report(out)
    assert rep["converged"] and rep["residual"] <= 1e-7


def test_lq_no_delay_agreement(tmp_path):
    out = tmp_path / "lq"
    assert run(["lq"], out) == 0
    rep = read_report(out)
    Js = [rep["J_fixed_point"], rep["J_gradient"], rep["J_riccati"]]
    assert (max(Js) - min(Js)) / min(Js) <= 0.01 and rep["agreement"]
    for name in ("fixed_point", "gradient"):
        assert (out / f"control_{name}.csv").exists()
    assert "runtimes" not in rep


def test_lq_rejects_other_problem_kinds(tmp_path):
    assert run(["lq", "--config", "default"], tmp_path) == 2
    assert run(["spde", "--config", "default"], tmp_path) == 2


def test_spde_command(tmp_path):
    out = tmp_path / "spde"
    assert run(["spde", "--config", write_cfg(tmp_path, FAST_SPDE)], out) == 0
    rep = read_report(out)
    assert rep["coercivity"]["passes"] and rep["improvement"] >= 0.05
    assert (out / "field.csv").read_text().startswith("t,zeta,mean_x,std_x")


def test_numerical_abort_exit_code(tmp_path):
    cfg = {"problem": {"kind": "custom", "A": [[0.0]], "A1": [[400.0]], "C": [[1.0]], "x0": [1.0]},
           "grid": {"dt": 0.1, "T": 5.0, "delta": 0.1},
           "measures": {"m": {"type": "dirac", "delta": 0.1, "atoms": [[-0.1, 1.0]]}},
           "noise": {"modes": 1, "eigenvalues": [0.0]}, "solver": {"n_traj": 1}}
    out = tmp_path / "abort"
    assert run(["forward", "--config", write_cfg(tmp_path, cfg)], out) == 3
    assert (out / "PARTIAL").exists()


def test_python_module_entry(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "delaysmp.cli", "utility", "--out", str(tmp_path), "--quiet"],
                         capture_output=True, text=True, env={**os.environ})
    assert res.returncode == 0 and res.stdout == ""
