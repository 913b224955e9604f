import numpy as np
import pytest

from src.topology_inference.config import Config
from src.topology_inference.gaussian_moments import MomentContext
from src.topology_inference.graph_model import (
    REFERENCE_LINEAR_ADJACENCY,
    build_linear_model,
    reorder_for_node,
)
from src.topology_inference.kernel import Dictionary, GaussianKernel, dictionary_grid
from src.topology_inference.output.recording_output_handler import RecordingOutputHandler

# Three nodes: node 1 is fed by nodes 2 and 3, which are independent.
SMALL_ADJACENCY = np.array([
    [0, 1, 1],
    [0, 0, 0],
    [0, 0, 0],
], dtype=float)


@pytest.fixture
def recording_handler():
    return RecordingOutputHandler()


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture(scope="session")
def reference_model():
    return build_linear_model(REFERENCE_LINEAR_ADJACENCY, 0.05)


@pytest.fixture(scope="session")
def small_model():
    return build_linear_model(SMALL_ADJACENCY, 0.5)


@pytest.fixture(scope="session")
def small_kernel():
    return GaussianKernel(1.0)


@pytest.fixture(scope="session")
def small_dictionary():
    return dictionary_grid(2, 2, (-1.0, 1.0), 3)


@pytest.fixture(scope="session")
def small_context(small_model, small_kernel, small_dictionary):
    return MomentContext.from_dictionary(reorder_for_node(small_model.input_covariance, 0),
                                         small_kernel, small_dictionary)


def random_context(seed: int, num_inputs: int, dictionary_size: int):
    """Random SPD input covariance with unit-scale entries and atoms in [-1, 1]."""
    rng = np.random.default_rng(seed)
    size = num_inputs + 1
    B = rng.normal(size=(size, size))
    covariance = 0.3 * (B @ B.T / size + 0.5 * np.eye(size))
    atoms = rng.uniform(-1.0, 1.0, size=(dictionary_size, num_inputs))
    bandwidth = rng.uniform(0.7, 1.5)
    return MomentContext(covariance, bandwidth, atoms)


def context_kernel_and_dictionary(context: MomentContext):
    return GaussianKernel(context.bandwidth), Dictionary(context.atoms)
