import os
from datetime import date

import pytest

from scatterd.dataset import DocumentStore, GenerationConfig, generate


def pytest_configure(config):
    # module-level logging noise from child servers is not useful in test output
    os.environ.setdefault("SCATTERD_LOG_LEVEL", "warn")


@pytest.fixture(scope="session")
def small_store(tmp_path_factory):
    """10 days x 200 docs, seed 7."""
    d = tmp_path_factory.mktemp("small_store")
    generate(GenerationConfig(7, date(2024, 1, 1), date(2024, 1, 11), docs_per_day=200), d)
    return DocumentStore(d)


@pytest.fixture(scope="session")
def quarter_store(tmp_path_factory):
    """90 days x 2,000 docs, seed 42."""
    d = tmp_path_factory.mktemp("quarter_store")
    generate(GenerationConfig(42, date(2024, 1, 1), date(2024, 3, 31), docs_per_day=2000), d)
    return DocumentStore(d)


# -- acceptance verdicts ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}
_acceptance_seen: set[int] = set()


@pytest.fixture
def verdict():
    """verdict(n, ok, detail, skipped=False) records the one-line outcome of criterion n."""

    def record(n: int, ok: bool, detail: str, skipped: bool = False) -> bool:
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        line = f"criterion {n:>2} {status}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_collection_finish(session):
    for item in session.items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _acceptance_seen.add(m.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_seen:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_seen):
        line = ACCEPTANCE_LINES.get(n, f"criterion {n:>2} FAIL  no verdict recorded (test errored or was deselected)")
        terminalreporter.write_line(line)
