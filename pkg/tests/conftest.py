import numpy as np
import pytest
import torch

from ipnets.core_data import Label, SparseSeries

torch.set_num_threads(1)

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def random_case(rng, D, max_obs=4, window=48.0, cid="c", label=None, integer_times=False):
    dims = []
    for _ in range(D):
        k = int(rng.integers(0, max_obs + 1))
        if integer_times:
            t = np.sort(rng.choice(np.arange(int(window) + 1), size=k, replace=False)).astype(float)
        else:
            t = np.sort(rng.choice(np.arange(0, window, 0.25), size=k, replace=False))
        dims.append(list(zip(t.tolist(), rng.normal(size=k).tolist())))
    return SparseSeries(cid, dims, label if label is not None else Label(cls=int(rng.integers(0, 2))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
