import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = range(1, 9)
_verdicts: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _ieee_subnormals():
    # training and the CLI turn on flush-to-zero; hypothesis refuses to draw floats under it
    yield
    torch.set_flush_denormal(False)


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, checks)`` records one PASS/FAIL line and asserts every check."""

    def report(n: int, checks: dict[str, tuple[bool, str]]):
        failed = [name for name, (ok, _) in checks.items() if not ok]
        detail = "; ".join(f"{name}: {info}" for name, (_, info) in checks.items())
        line = f"CRITERION {n}: {'FAIL' if failed else 'PASS'} | {detail}"
        _verdicts[n] = line
        print(line)
        assert not failed, f"criterion {n} failed: {', '.join(failed)}"

    return report


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for reports in terminalreporter.stats.values() for r in reports if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        terminalreporter.write_line(_verdicts.get(n, f"CRITERION {n}: FAIL | not measured (error or skipped)"))
