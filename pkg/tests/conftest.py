import os
from pathlib import Path

import numpy as np
import pytest

DATA_DIR = Path(os.environ.get("CFN_DATA_DIR", "/root/data/mnist"))


def have_mnist() -> bool:
    return (DATA_DIR / "train-images-idx3-ubyte").exists() or (
        DATA_DIR / "train-images-idx3-ubyte.gz"
    ).exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found in {DATA_DIR}")


@pytest.fixture(scope="session")
def mnist_train():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {DATA_DIR}")
    from cfnet.ingest import load_mnist

    return load_mnist(DATA_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    if not have_mnist():
        pytest.skip(f"MNIST not found in {DATA_DIR}")
    from cfnet.ingest import load_mnist

    return load_mnist(DATA_DIR, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; asserts on failure."""

    def _report(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
