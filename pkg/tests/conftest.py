import os

# single-threaded BLAS keeps results bitwise reproducible and matches the
# one-core timing budget
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mrlf.data import write_dataset  # noqa: E402
from mrlf.synth import SynthConfig, synth_generate  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """120 posts over 4 locations, clean signal."""
    return synth_generate(SynthConfig(n_locations=4, n_posts=120, signal=1.0, noise=0.2,
                                      feature_dim=16, n_filler_words=40, n_filler_tags=10,
                                      seed=3))


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory, small_synth):
    posts, table = small_synth
    out = tmp_path_factory.mktemp("synth")
    write_dataset(out, posts, table, name="small")
    return out


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; returns the verdict."""
    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
