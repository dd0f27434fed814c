import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dacal.synth import benchmark_config, write_experiment  # noqa: E402

ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Register an acceptance outcome; printed in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return benchmark_config(seed=3, n_train=600, n_val=300, n_test=300, n_ood=300)


@pytest.fixture(scope="session")
def small_experiment(tmp_path_factory, small_config):
    """A written synthetic experiment: ``(manifest, directory)``."""
    out = tmp_path_factory.mktemp("synth")
    manifest = write_experiment(small_config, out, k=10)
    return manifest, out
