from pathlib import Path

import numpy as np
import pytest

from dualspace import ImageBatch, TrainConfig, get_dataset, make_mock_backbone, preprocess

DATA_DIR = Path(__file__).parent / "data"

# small, fast training profile shared by distillation-heavy tests
FAST_TRAIN = dict(epochs=10, batch_size=32, learning_rate=1e-3)


@pytest.fixture(scope="session")
def mock_backbone():
    return make_mock_backbone(seed=0)


@pytest.fixture(scope="session")
def blob_dataset():
    return get_dataset("synthetic-blobs", train_per_class=100, test_per_class=40)


@pytest.fixture(scope="session")
def blob_batches(blob_dataset, mock_backbone):
    train, test = blob_dataset.load()
    return (preprocess(train, mock_backbone.spec),
            preprocess(test, mock_backbone.spec))


@pytest.fixture(scope="session")
def trained_ensemble(mock_backbone, blob_dataset, blob_batches):
    train_raw, _ = blob_dataset.load()
    prep_train, _ = blob_batches
    normal = prep_train.subset(np.flatnonzero(train_raw.labels == 0), drop_labels=True)
    from dualspace import train_students
    return train_students([normal], mock_backbone, [2, 3],
                          TrainConfig(seed=0, **FAST_TRAIN))


@pytest.fixture()
def tiny_batch():
    rng = np.random.default_rng(7)
    return ImageBatch(rng.random((4, 32, 32, 3)), np.array([f"t{i}" for i in range(4)]),
                      np.array([0, 0, 1, 1]))
