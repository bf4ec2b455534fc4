import os
from pathlib import Path

import pytest

MNIST_DIR = Path(os.environ.get("FEDCELL_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() and (MNIST_DIR / "t10k-labels-idx1-ubyte").exists()


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set FEDCELL_MNIST_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    from fedcell.datasets import load_mnist

    return load_mnist(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte")
