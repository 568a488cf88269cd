import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance report ----------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        name = marker.args[0]
        entry = _CRITERIA.setdefault(name, {"ok": True, "details": []})
        entry["ok"] = entry["ok"] and rep.passed
        entry["details"] += [v for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: (not n[1:].isdigit(), int(n[1:]) if n[1:].isdigit() else 0, n)):
        entry = _CRITERIA[name]
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{name:<6} {'PASS' if entry['ok'] else 'FAIL'}  {detail}")
