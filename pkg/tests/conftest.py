import numpy as np
import pytest

from dhcnet.data import DatasetSpec, gen_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 classes x 2 train / 2 test at 32 px; fast enough for harness tests."""
    out = tmp_path_factory.mktemp("tiny")
    spec = DatasetSpec(num_classes=4, train_per_class=2, test_per_class=2, image_size=32, seed=3)
    gen_dataset(spec, out)
    return out
