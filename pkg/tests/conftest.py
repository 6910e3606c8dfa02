import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(label, limit_seconds)`` returns a dict to fill."""
    import time
    entries = []

    def start(label, limit):
        rec = {"label": label, "limit": limit, "t0": time.perf_counter(), "detail": ""}
        entries.append(rec)
        return rec

    yield start
    failed = getattr(request.node, "rep_call", None)
    for rec in entries:
        rec["elapsed"] = time.perf_counter() - rec["t0"]
        rec["passed"] = failed is not None and failed.passed
        ACCEPTANCE.append(rec)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(ACCEPTANCE, key=lambda r: int(r["label"].split()[0][1:])):
        verdict = "PASS" if rec["passed"] else "FAIL"
        budget = f"of {rec['limit']}s" if rec["limit"] else "no budget"
        terminalreporter.write_line(f"{verdict}  {rec['label']}  ({rec['elapsed']:.1f}s {budget})  {rec['detail']}")
