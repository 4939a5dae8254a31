import time
from contextlib import contextmanager

import pytest

RESULTS_KEY = pytest.StashKey[list]()


class Criterion:
    def __init__(self, number: int, title: str, limit: float):
        self.number, self.title, self.limit = number, title, limit
        self.detail = ""


def pytest_configure(config):
    config.stash[RESULTS_KEY] = []


@pytest.fixture
def criterion(request):
    """Context manager timing one acceptance criterion and recording its verdict."""
    results = request.config.stash[RESULTS_KEY]

    @contextmanager
    def run(number: int, title: str, limit: float):
        c = Criterion(number, title, limit)
        start = time.perf_counter()
        try:
            yield c
        except BaseException as exc:
            elapsed = time.perf_counter() - start
            results.append((c, False, elapsed, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed <= limit
        results.append((c, ok, elapsed, c.detail if ok else f"runtime {elapsed:.0f}s over {limit:.0f}s"))
        assert ok, f"criterion {number} took {elapsed:.1f}s (limit {limit:.0f}s)"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(RESULTS_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for c, ok, elapsed, detail in sorted(results, key=lambda r: r[0].number):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {c.number:2d}. {c.title} ({elapsed:.1f}s): {detail}")
