import numpy as np
import pytest
import torch

from strokenext.data import generate_synthetic


@pytest.fixture(scope="session")
def synth_subtype(tmp_path_factory):
    """Small synthetic subtype dataset shared across tests."""
    root = tmp_path_factory.mktemp("synth") / "subtype"
    index = generate_synthetic(n_per_class=12, task="subtype", seed=7, out=root)
    return root, index


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
