import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# one line per acceptance criterion, printed after the run
_ACCEPTANCE: list[str] = []


@pytest.fixture
def report_criterion():
    def record(number: int, ok: bool, detail: str, elapsed: float, limit: float):
        timing_ok = elapsed < limit
        status = "PASS" if ok and timing_ok else "FAIL"
        line = (f"[{status}] criterion {number:2d}: {detail} | runtime {elapsed:.2f} s "
                f"(limit {limit:g} s{'' if timing_ok else ', EXCEEDED'})")
        _ACCEPTANCE.append(line)
        print(line)
        return ok and timing_ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
