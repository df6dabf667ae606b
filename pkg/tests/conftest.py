import sys
from pathlib import Path

import pytest

# shared test helpers, and the package itself for uninstalled checkouts
sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from dltsim.cluster import ClusterSpec, load_device_preset
from dltsim.workload import ModelSpec

from builders import exact_device, toy_cluster


@pytest.fixture(scope="session")
def tiny_model() -> ModelSpec:
    return ModelSpec("tiny", num_layers=4, hidden_size=128, seq_len=64, vocab_size=512)


@pytest.fixture(scope="session")
def lab_model() -> ModelSpec:
    # Power-of-two shapes; pairs with the exact-arithmetic device.
    return ModelSpec("lab", num_layers=8, hidden_size=128, seq_len=256, vocab_size=4096)


@pytest.fixture(scope="session")
def cluster8() -> ClusterSpec:
    return ClusterSpec(2, 4, 2 * 2**30, load_device_preset("fast"))


@pytest.fixture(scope="session")
def cluster16_exact() -> ClusterSpec:
    return ClusterSpec(2, 8, 32_000_000, exact_device())


@pytest.fixture
def single_device_cluster() -> ClusterSpec:
    return toy_cluster(1, 1)
