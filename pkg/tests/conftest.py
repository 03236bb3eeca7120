import numpy as np
import pytest

from covft_lab.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a, name=""):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(cid: str, title: str, passed: bool, detail: str) -> bool:
        store[cid] = f"{'PASS' if passed else 'FAIL'}  {cid:<4}{title}: {detail}"
        print(store[cid])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(store, key=lambda c: int(c[1:])):
        terminalreporter.write_line(store[cid])
