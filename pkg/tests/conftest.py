import pytest

_RESULTS = pytest.StashKey[dict]()
N_CRITERIA = 8


class AcceptanceRecorder:
    def __init__(self, store: dict):
        self.store = store

    def __call__(self, number: int, title: str, passed: bool, detail: str) -> bool:
        self.store[number] = (title, bool(passed), detail)
        return bool(passed)


@pytest.fixture
def acceptance(request):
    """Record one acceptance outcome; the terminal summary prints a line per criterion."""
    return AcceptanceRecorder(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            title, ok, detail = results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n}. no result recorded (not selected, or crashed before reporting)")
