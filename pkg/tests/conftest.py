"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_results = {}  # n -> [title, passed, details]


@pytest.fixture
def measured(request):
    """Callable that attaches measured values to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    details = {}

    def record(**kw):
        details.update(kw)

    yield record
    if marker is not None:
        _results.setdefault(marker.args[0], [marker.args[1], None, {}])[2].update(details)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n, title = marker.args
    entry = _results.setdefault(n, [title, None, {}])
    ok = rep.passed
    entry[1] = ok if entry[1] is None else entry[1] and ok


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, details = _results[n]
        status = "PASS" if ok else "FAIL"
        extra = ", ".join(f"{k}={_fmt(v)}" for k, v in details.items())
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{extra}]" if extra else ""))


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)
