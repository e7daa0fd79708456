import numpy as np
import pytest

from gaprune import MLP, OptimizerConfig, SparsityPolicy, make_synthetic


@pytest.fixture
def tiny_data():
    # small teacher task, fast enough for full training loops
    return make_synthetic([6, 8, 3], n_samples=240, seed=7)


@pytest.fixture
def tiny_model():
    return MLP.from_sizes([6, 10, 8, 3], seed=3)


@pytest.fixture
def opt():
    return OptimizerConfig(lr=0.05, momentum=0.9, weight_decay=1e-4, schedule="cosine")


@pytest.fixture
def policy():
    return SparsityPolicy(0.5)


def random_batch(n_in, n_classes, n=7, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, n_in)), rng.integers(n_classes, size=n)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
