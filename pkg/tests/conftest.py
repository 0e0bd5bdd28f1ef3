"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

_results = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if marker:
        _results[marker[0]] = (marker[1], report.outcome, report.duration)


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark:
        item.user_properties.append(("criterion", mark.args))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, outcome, seconds = _results[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number}: {title} ({seconds:.2f} s)")
