import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
