import os
from pathlib import Path

import numpy as np
import pytest

from treebp.datasets import ImageSet
from treebp.models import Geometry, Tree3Config, init_params
from treebp.tensor_core import Activation


def data_dir():
    d = os.environ.get("TREEBP_DATA_DIR")
    return Path(d) if d else None


def have_mnist():
    d = data_dir()
    if d is None:
        return False
    root = d / "mnist" if (d / "mnist").is_dir() else d
    return any((root / f"train-images-idx3-ubyte{ext}").exists() for ext in ("", ".gz"))


def have_cifar():
    d = data_dir()
    if d is None:
        return False
    root = d / "cifar-10-batches-bin" if (d / "cifar-10-batches-bin").is_dir() else d
    return (root / "data_batch_1.bin").exists()


def mnist_proxy(seed=0):
    """Real MNIST digits bundled with mlxtend (5,000 images), split 4,000 / 1,000."""
    data = pytest.importorskip("mlxtend.data")
    X, y = data.mnist_data()
    perm = np.random.default_rng(seed).permutation(len(y))
    X = X[perm].reshape(-1, 1, 28, 28).astype(np.uint8)
    y = y[perm].astype(np.int64)
    return ImageSet(X[:4000], y[:4000]), ImageSet(X[4000:], y[4000:])


def random_images(n, geometry=Geometry.CIFAR, seed=0):
    rng = np.random.default_rng(seed)
    g = Geometry(geometry)
    return ImageSet(rng.integers(0, 256, (n,) + g.image_shape, dtype=np.uint8),
                    rng.integers(0, 10, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_tree():
    config = Tree3Config(K=2, M=2, activation=Activation.RELU)
    return config, init_params(config, seed=3, dtype=np.float64)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
