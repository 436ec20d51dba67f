from hypothesis import HealthCheck, settings

settings.register_profile(
    "repro", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repro")

# criterion number -> (title, {nodeid: passed})
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, (title, {}))[1][item.nodeid] = None


def pytest_runtest_logreport(report):
    for _, results in _criteria.values():
        if report.nodeid in results:
            if report.failed:
                results[report.nodeid] = False
            elif report.when == "call" and results[report.nodeid] is None:
                results[report.nodeid] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, results = _criteria[number]
        outcomes = list(results.values())
        if any(v is None for v in outcomes):
            status = "NOT RUN" if all(v is None for v in outcomes) else "INCOMPLETE"
        else:
            status = "PASS" if all(outcomes) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number:2d} {status:<10} {title}")
