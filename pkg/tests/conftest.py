import numpy as np
import pytest

from vectorfit.data import DatasetDescriptor, load_dataset
from vectorfit.models import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_spec():
    return ModelSpec(architecture="mlp", depth=2, hidden=8, input_dim=2, classes=2, dtype="float64")


@pytest.fixture
def small_tf_spec():
    return ModelSpec(hidden=16, heads=2, ffn=32, depth=2, max_len=16, dtype="float64")


@pytest.fixture(scope="session")
def blobs64():
    return load_dataset(DatasetDescriptor(kind="synthetic_blobs", noise=0.4), np.float64)


@pytest.fixture(scope="session")
def text_b():
    return load_dataset(DatasetDescriptor(kind="char_lm", path="bundled:b", seq_len=16), np.float64)
