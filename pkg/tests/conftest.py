from __future__ import annotations

import time

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Time one acceptance criterion and record a PASS/FAIL line for it.

    Usage: ``with verdict("1. name", budget_s) as note: ...``; ``note`` takes
    an optional detail string shown on the line.
    """
    lines = request.config.stash.setdefault(_LINES, [])

    class _Verdict:
        def __init__(self, name, budget):
            self.name, self.budget, self.detail = name, budget, ""

        def __call__(self, detail):
            self.detail = detail

        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            dt = time.perf_counter() - self.t0
            ok = exc_type is None and dt < self.budget
            why = "" if exc_type is None else f" [{exc_type.__name__}]"
            if exc_type is None and not ok:
                why = " [over time budget]"
            line = f"{'PASS' if ok else 'FAIL'} {self.name} ({dt:.2f}s / {self.budget:g}s){why}"
            if self.detail:
                line += f": {self.detail}"
            lines.append(line)
            print(line)
            if exc_type is None:
                assert ok, line
            return False

    return _Verdict


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
