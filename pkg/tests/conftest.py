import os
from pathlib import Path

import numpy as np
import pytest

from graphssl.graph import generate_sbm


def pytest_addoption(parser):
    parser.addoption("--cora", action="store", default=None,
                     help="path to a Cora export in Graph-JSON (enables the Cora acceptance runs)")


@pytest.fixture(scope="session")
def cora_path(request):
    p = request.config.getoption("--cora")
    if p is None:
        default = Path(__file__).resolve().parent.parent / "data" / "cora.json"
        p = str(default) if default.exists() else None
    if p is None or not os.path.exists(p):
        pytest.skip("no Cora Graph-JSON supplied (use --cora PATH or data/cora.json)")
    return p


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm([20, 20, 20], 0.3, 0.02, 8, seed=3, noise=0.5)


@pytest.fixture(scope="session")
def tiny_sbm():
    return generate_sbm([6, 6], 0.6, 0.05, 4, seed=1, train_per_class=2, val_per_class=2)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    status = "SKIP" if rep.skipped else ("FAIL" if rep.failed else "PASS")
    lines = item.config._acceptance.setdefault(mark.args[0], [])
    detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
    lines.append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        checks = results[n]
        statuses = {s for _, s, _ in checks}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        terminalreporter.write_line(f"criterion {n}: {overall} ({len(checks)} checks)")
        for name, status, detail in checks:
            terminalreporter.write_line(f"    {status} {name}" + (f"  [{detail}]" if detail else ""))
