from __future__ import annotations

import time

import pytest

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_addoption(parser):
    parser.addoption(
        "--smollm",
        default=None,
        help="path to a local SmolLM2-135M checkpoint for the optional qualitative acceptance check",
    )


class _Criterion:
    def __init__(self, key: str, title: str):
        self.key = key
        self.title = title
        self.detail = ""
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""
    marker = request.node.get_closest_marker("criterion")
    key, title = marker.args
    c = _Criterion(key, title)
    _ACCEPTANCE[key] = ("FAIL", title)
    yield c
    if request.node.rep_call_outcome == "passed":
        _ACCEPTANCE[key] = ("PASS", f"{title} [{c.elapsed:.2f}s] {c.detail}".rstrip())
    elif request.node.rep_call_outcome == "skipped":
        _ACCEPTANCE[key] = ("SKIP", f"{title} {c.detail}".rstrip())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        item.rep_call_outcome = rep.outcome


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k)):
        status, text = _ACCEPTANCE[key]
        terminalreporter.write_line(f"[{status}] criterion {key}: {text}")
