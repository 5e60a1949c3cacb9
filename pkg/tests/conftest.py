import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("voxprim", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("voxprim")

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[n] = (title, "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL"), measured)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status, measured = _ACCEPTANCE[n]
        line = f"[{status}] {n:>2}. {title}"
        if measured:
            line += f"  ({measured})"
        terminalreporter.write_line(line)
