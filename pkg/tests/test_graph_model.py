import numpy as np
import pytest

from src.topology_inference.errors import DimensionMismatchError, ModelConstructionError, SamplingError
from src.topology_inference.graph_model import (
    REFERENCE_LINEAR_ADJACENCY,
    AdjacencyMatrix,
    NonlinearSignalModel,
    build_linear_model,
    estimate_covariance,
    identity_minus_map,
    nonlinear_map,
    node_order,
    reorder_for_node,
    sample_linear,
    sample_nonlinear,
    sample_signals,
    solve_inverse,
    split_node,
)


def test_reference_graph_is_invertible():
    assert np.linalg.det(np.eye(5) - REFERENCE_LINEAR_ADJACENCY) == pytest.approx(-17.0)


def test_linear_covariance_matches_closed_form(reference_model):
    mixing = np.linalg.inv(np.eye(5) - REFERENCE_LINEAR_ADJACENCY)
    expected = 0.05 ** 2 * mixing @ mixing.T
    np.testing.assert_allclose(reference_model.input_covariance, expected, rtol=1e-12, atol=1e-16)
    L = reference_model.cholesky_factor
    np.testing.assert_allclose(L @ L.T, expected, rtol=1e-10, atol=1e-16)


def test_singular_graph_is_rejected():
    with pytest.raises(ModelConstructionError):
        build_linear_model(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.1)


@pytest.mark.parametrize("entries", [
    np.zeros((2, 3)),
    np.array([[1.0, 0.0], [0.0, 0.0]]),
    np.array([[0.0, np.nan], [0.0, 0.0]]),
])
def test_malformed_adjacency_is_rejected(entries):
    with pytest.raises(ModelConstructionError):
        AdjacencyMatrix(entries, binary=False)


def test_binary_adjacency_rejects_weights():
    with pytest.raises(ModelConstructionError):
        AdjacencyMatrix(np.array([[0.0, 0.5], [0.0, 0.0]]))
    weighted = AdjacencyMatrix(np.array([[0.0, 0.5], [0.0, 0.0]]), binary=False)
    assert weighted.parents_row(0).tolist() == [1]


def test_parents_row_drops_the_node_itself():
    adjacency = AdjacencyMatrix(REFERENCE_LINEAR_ADJACENCY)
    assert adjacency.parents_row(0).tolist() == [1, 0, 1, 1]
    assert adjacency.parents_row(2).tolist() == [1, 0, 1, 0]


def test_linear_sampling_is_reproducible_and_has_the_model_covariance(reference_model):
    first = sample_linear(reference_model, 11, 200_000)
    second = sample_linear(reference_model, 11, 200_000)
    np.testing.assert_array_equal(first, second)
    estimate = estimate_covariance(first)
    np.testing.assert_allclose(estimate, reference_model.input_covariance,
                               atol=0.02 * np.abs(reference_model.input_covariance).max())


def test_sample_count_must_be_positive(reference_model):
    with pytest.raises(ValueError):
        sample_linear(reference_model, 0, 0)


def test_node_reordering_moves_target_last():
    assert node_order(4, 1).tolist() == [0, 2, 3, 1]
    covariance = np.arange(16, dtype=float).reshape(4, 4)
    reordered = reorder_for_node(covariance, 1)
    assert reordered[-1, -1] == covariance[1, 1]
    assert reordered[0, -1] == covariance[0, 1]
    samples = np.arange(8, dtype=float).reshape(2, 4)
    inputs, target = split_node(samples, 1)
    np.testing.assert_array_equal(inputs, samples[:, [0, 2, 3]])
    np.testing.assert_array_equal(target, samples[:, 1])
    with pytest.raises(DimensionMismatchError):
        node_order(3, 3)


class TestNonlinearModel:
    model = NonlinearSignalModel()

    def test_simplified_residual_agrees_with_literal_map(self):
        y = np.array([0.7, 0.2, -0.69])
        np.testing.assert_allclose(identity_minus_map(self.model, y), y - nonlinear_map(self.model, y),
                                   rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_inverse_solves_the_implicit_equation(self, seed):
        rho = np.random.default_rng(seed).standard_normal(3)
        y = solve_inverse(self.model, rho)
        np.testing.assert_allclose(identity_minus_map(self.model, y), rho, atol=1e-9)

    def test_singular_noise_draw_raises(self):
        with pytest.raises(SamplingError) as info:
            solve_inverse(self.model, np.array([0.4, 0.1, -0.4]))
        np.testing.assert_array_equal(info.value.noise, [0.4, 0.1, -0.4])

    def test_noise_must_have_three_entries(self):
        with pytest.raises(DimensionMismatchError):
            solve_inverse(self.model, np.zeros(2))

    def test_sampling_is_reproducible(self):
        first = sample_nonlinear(self.model, 5, 50)
        np.testing.assert_array_equal(first, sample_signals(self.model, 5, 50))
        assert first.shape == (50, 3)
        assert np.all(np.isfinite(first))
