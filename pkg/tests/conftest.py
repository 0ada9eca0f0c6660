"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import defaultdict

_ITEMS = {}
_RESULTS = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _ITEMS[item.nodeid] = m.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _ITEMS:
        return
    if report.when == "call" or report.failed:
        details = [v for k, v in report.user_properties if k == "detail"]
        _RESULTS[_ITEMS[report.nodeid]].append((report.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for (number, title), runs in sorted(_RESULTS.items()):
        ok = all(passed for passed, _ in runs)
        details = "; ".join(d for _, ds in runs for d in ds)
        tr.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{details}]" if details else ""))
