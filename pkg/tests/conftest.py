"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_OUTCOMES: dict[str, tuple[str, str, float]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            criterion, title = marker.args[0], marker.args[1] if len(marker.args) > 1 else item.name
            item.user_properties.append(("criterion", (str(criterion), title)))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    criterion, title = props["criterion"]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _OUTCOMES[criterion] = (status, title, report.duration)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_OUTCOMES, key=int):
        status, title, duration = _OUTCOMES[criterion]
        terminalreporter.write_line(f"{status} criterion {criterion}: {title} ({duration:.2f}s)")
