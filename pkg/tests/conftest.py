import pytest

from ppguide.config import PipelineConfig
from ppguide.harness import run_pipeline

_VERDICTS: dict[int, tuple[str, str, str]] = {}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """The default end-to-end run, shared by every test that needs trained models."""
    return run_pipeline(PipelineConfig(), tmp_path_factory.mktemp("pipeline"))


@pytest.fixture
def verdict():
    """Record a criterion's outcome; the assertion still decides the test."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        _VERDICTS[number] = (status, title, detail)
        print(f"[{status}] criterion {number}: {title} {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, title, detail = _VERDICTS[n]
        terminalreporter.write_line(f"{status} {n:>2}. {title} {detail}".rstrip())
