import time
from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


class Criterion:
    def __init__(self, name, budget):
        self.name = name
        self.budget = budget
        self.failures = []
        self.notes = []
        self.extra_seconds = 0.0

    def check(self, ok, what):
        if not ok:
            self.failures.append(what)
        return bool(ok)

    def note(self, text):
        self.notes.append(text)


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[_LINES]

    @contextmanager
    def run(name, budget=None):
        c = Criterion(name, budget)
        t0 = time.perf_counter()
        try:
            yield c
        except Exception as exc:
            c.failures.append(f"{type(exc).__name__}: {exc}")
            raise
        finally:
            # work done in shared fixtures is charged via extra_seconds
            dt = time.perf_counter() - t0 + c.extra_seconds
            if budget is not None and dt > budget:
                c.failures.append(f"runtime {dt:.1f}s > {budget:.0f}s")
            status = "FAIL" if c.failures else "PASS"
            detail = "; ".join(c.notes + [f"failed: {f}" for f in c.failures])
            line = f"[{status}] criterion {name} ({dt:.1f}s) {detail}".rstrip()
            lines.append(line)
            print(line)
        assert not c.failures, "; ".join(c.failures)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[2].split(".")[0]) if s.split()[2][0].isdigit() else 99):
        terminalreporter.write_line(line)
