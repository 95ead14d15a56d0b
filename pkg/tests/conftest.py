_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    """Collect one outcome per acceptance criterion (tests named test_criterion_NN_*)."""
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    label = "_".join(name.split("_")[3:])
    failed = report.failed
    if report.when == "call" or failed:
        previous = _CRITERIA.get(number, (label, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _CRITERIA[number] = (label, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        label, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {label}: {status}")
