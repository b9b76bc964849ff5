import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sspfusion.imagedata import write_synthetic_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dataset(tmp_path):
    return write_synthetic_dataset(tmp_path / "data", 3, 64, 64, seed=7)


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.manual_seed(0)
    yield
