"""Shared fixtures and the acceptance-criteria summary printed after the run."""

from collections import OrderedDict

import pytest

CRITERIA = OrderedDict(
    [
        (1, "streaming-parallel equivalence"),
        (2, "causality"),
        (3, "scan oracle"),
        (4, "discretization"),
        (5, "gradient correctness"),
        (6, "loss properties"),
        (7, "toy pretraining"),
        (8, "throughput trend"),
        (9, "persistence"),
    ]
)

_outcomes: dict[int, list[tuple[str, str, list[str]]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.fixture
def measured(request):
    """Record a measurement line that the acceptance summary prints next to the criterion."""

    def record(text: str) -> None:
        request.node.user_properties.append(("measured", text))

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        notes = [value for key, value in item.user_properties if key == "measured"]
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.outcome, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title in CRITERIA.items():
        results = _outcomes.get(number)
        if not results:
            tr.write_line(f"criterion {number} NOT RUN  {title}")
            continue
        passed = all(outcome == "passed" for _, outcome, _ in results)
        notes = "; ".join(note for _, _, ns in results for note in ns)
        tr.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{notes}]" if notes else ""))
