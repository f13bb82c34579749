import contextlib
import os
import shutil
import tempfile

import pytest

_CRITERIA = []


def _scratch_root():
    return "/dev/shm" if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK) else None


@pytest.fixture
def shm_dir():
    path = tempfile.mkdtemp(prefix="mtcd-test-", dir=_scratch_root())
    yield path
    shutil.rmtree(path, ignore_errors=True)


@pytest.fixture
def criterion():
    """``with criterion(n, title): ...`` records a PASS/FAIL line for the summary."""

    @contextlib.contextmanager
    def record(number, title):
        note = {}
        try:
            yield note
        except BaseException as exc:
            line = f"criterion {number} FAIL: {title}"
            if note.get("detail"):
                line += f" [{note['detail']}]"
            _CRITERIA.append((number, line + f" ({type(exc).__name__})"))
            print(line, flush=True)
            raise
        line = f"criterion {number} PASS: {title}"
        if note.get("detail"):
            line += f" [{note['detail']}]"
        _CRITERIA.append((number, line))
        print(line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(line)
