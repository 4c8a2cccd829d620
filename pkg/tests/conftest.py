import numpy as np
import pytest

from ssadv.models import ArchConfig, build_model

_acceptance: dict[int, tuple[str, str]] = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL (known)": 2, "FAIL": 3}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (report.when == "call" or report.outcome != "passed"):
        return
    n, title = marker.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    if hasattr(report, "wasxfail"):
        # an expected failure still means the criterion is not met
        status = "FAIL (known)" if report.outcome == "skipped" else "FAIL"
    prev = _acceptance.get(n)
    # a criterion with several tests takes its worst outcome
    if prev is None or _RANK[status] > _RANK[prev[0]]:
        _acceptance[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, title = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, size=8, width=0.25, classes=10, ss_classes=4):
    return build_model(ArchConfig("tiny-cnn", width, (3, size, size), classes, ss_classes), seed)
