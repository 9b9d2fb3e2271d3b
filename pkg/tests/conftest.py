import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mimicfool.models import train_bundle  # noqa: E402


@pytest.fixture(scope="session")
def plain_bundle():
    """Plain CNN (unit input range) with classifier, caption and QA heads; about 25 s to train."""
    return train_bundle("plain", seed=0)


@pytest.fixture(scope="session")
def invertible_bundle():
    """Invertible extractor with a classifier head only; about 40 s to train."""
    return train_bundle("invertible", seed=0, heads=())


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """``verdict(criterion, ok, detail)`` prints a PASS/FAIL line outside output capture, then asserts ``ok``."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
