import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from latentgen.datapipe import ToyShapesConfig, gen_toy_dataset


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    # Tests that rely on randomness seed explicitly; this pins everything else.
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_small():
    """64-per-class toy batch for cheap functional tests."""
    cfg = ToyShapesConfig(size=32, seed=11)
    images, labels, manifest = gen_toy_dataset(cfg, 64)
    return images, labels, manifest
