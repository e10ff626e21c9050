import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def record(request):
    """record(number, title, passed, detail) stores one acceptance line."""
    results = request.config.stash[ACCEPTANCE_KEY]

    def _record(number, title, passed, detail):
        results[number] = (title, bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"[{number}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
