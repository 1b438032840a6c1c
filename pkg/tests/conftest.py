# nodeid -> outcome for tests marked with @pytest.mark.criterion
_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _criteria[item.nodeid] = (mark.args[0], "NOT RUN")


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    label, state = _criteria[report.nodeid]
    if report.failed:
        _criteria[report.nodeid] = (label, "FAIL")
    elif report.when == "call" and report.passed and state != "FAIL":
        _criteria[report.nodeid] = (label, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, state in _criteria.values():
        terminalreporter.write_line(f"{state:<7} {label}")
