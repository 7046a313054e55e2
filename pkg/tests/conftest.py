import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from comil.data import SyntheticSpec, generate, split  # noqa: E402
from comil.model import Bag, MilModel, expand_head  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return expand_head(MilModel.init(d_in=4, d=5, attn_dim=3, hidden=6, seed=3), [0, 1], seed=4)


@pytest.fixture
def small_bag(rng):
    return Bag("b0", 1, rng.normal(size=(5, 4)))


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 classes, 8 bags each, 12 instances; split 6/2."""
    spec = SyntheticSpec(num_classes=4, bags_per_class=8, instances_per_bag=12, d_in=6, seed=11)
    return split(generate(spec), 0.75, 11)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
