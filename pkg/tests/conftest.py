import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


@pytest.fixture
def record_criterion():
    def record(name: str, passed, detail: str = "") -> None:
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        ACCEPTANCE_RESULTS.append((name, status, detail))
        print(f"[{status}] {name}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
