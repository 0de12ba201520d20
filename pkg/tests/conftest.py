import json
import os

import numpy as np
import pytest

# small, fast synthetic protocol used by the harness and CLI tests
SYNTHETIC = {
    "dataset.kind": "synthetic",
    "dataset.synthetic.n": 600,
    "dataset.synthetic.d": 16,
    "dataset.synthetic.informative": [2, 5, 9, 13],
    "fraction": 0.25,
    "swpa.n": 2,
    "pfi.c": 3,
    "random.runs": 3,
    "train.max_epochs": 60,
    "train.patience": 15,
    "train.learning_rate": 0.01,
    "seed": 3,
}


@pytest.fixture
def synthetic_flat():
    return dict(SYNTHETIC)


@pytest.fixture
def synthetic_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SYNTHETIC))
    return path


def mnist_sample_arrays():
    """MNIST images (n, 28, 28) uint8 and labels.

    Uses IDX files from $FEATRANK_MNIST_DIR when set (the standard
    train-images-idx3-ubyte / train-labels-idx1-ubyte pair), otherwise the
    5000-image sample bundled with mlxtend.
    """
    root = os.environ.get("FEATRANK_MNIST_DIR")
    if root:
        from featrank.data import load_idx

        ds = load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                      os.path.join(root, "train-labels-idx1-ubyte"))
        images = np.rint(ds.X * 255).astype(np.uint8).reshape(-1, 28, 28)
        return images, ds.y
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
