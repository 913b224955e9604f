"""
Online estimation of the derivative-kernel coefficients for one target node.

The state is immutable: `update_covariance` and `step` return new states, so a
realization is a fold over samples. Delta_m measures how strongly the current
estimate depends on input node m, and `read_topology` turns those values into
an adjacency row.
"""
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.topology_inference.errors import (
    DimensionMismatchError,
    DivergenceError,
    InvalidHyperparameterError,
)

# Initial diagonal of every covariance estimate.
COVARIANCE_EPSILON = 1e-8


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """
    Online estimator for one target node. r_tt_hat has shape (N, k_s, k_s).
    When exact_rtt is set, r_tt_hat holds the exact R_tt,m and is never updated.
    """
    gamma_hat: np.ndarray
    r_tt_hat: np.ndarray
    step_size: float
    reg_weight: float
    forgetting: float
    iteration: int = 0
    exact_rtt: bool = False

    @property
    def num_inputs(self) -> int:
        return self.r_tt_hat.shape[0]

    @property
    def feature_length(self) -> int:
        return self.gamma_hat.size


@dataclass(frozen=True, eq=False)
class TopologyEstimate:
    """Delta_m per input node, the thresholded adjacency row and the thresholds used."""
    delta: np.ndarray
    adjacency_row: np.ndarray
    thresholds: np.ndarray


def init_state(num_inputs: int, dictionary_size: int, mu: float, eta: float, forgetting: float,
               gamma0: Optional[np.ndarray] = None, exact_rtt: Optional[np.ndarray] = None) -> EstimatorState:
    """
    Fresh estimator with gamma_hat = gamma0 (zeros by default) and every
    covariance estimate at COVARIANCE_EPSILON * I, or at the supplied exact R_tt,m.
    """
    if not mu > 0:
        raise InvalidHyperparameterError(f"Step size must be positive, got {mu}.")
    if not eta >= 0:
        raise InvalidHyperparameterError(f"Regularization weight must be nonnegative, got {eta}.")
    if not 0.0 <= forgetting < 1.0:
        raise InvalidHyperparameterError(f"Forgetting factor must lie in [0, 1), got {forgetting}.")
    if num_inputs < 1 or dictionary_size < 1:
        raise InvalidHyperparameterError("Need at least one input node and one dictionary atom.")

    k_s = (num_inputs + 1) * dictionary_size
    if gamma0 is None:
        gamma = np.zeros(k_s)
    else:
        gamma = np.array(gamma0, dtype=float).ravel()
        if gamma.size != k_s:
            raise DimensionMismatchError(f"gamma0 has {gamma.size} entries, expected {k_s}.")

    if exact_rtt is not None:
        r_tt = np.array(exact_rtt, dtype=float)
        if r_tt.shape != (num_inputs, k_s, k_s):
            raise DimensionMismatchError(
                f"Exact R_tt has shape {r_tt.shape}, expected {(num_inputs, k_s, k_s)}.")
    else:
        r_tt = np.repeat(COVARIANCE_EPSILON * np.eye(k_s)[None, :, :], num_inputs, axis=0)

    return EstimatorState(gamma, r_tt, float(mu), float(eta), float(forgetting),
                          exact_rtt=exact_rtt is not None)


def update_covariance(state: EstimatorState, t_vectors: np.ndarray) -> EstimatorState:
    """R_tt,m <- alpha R_tt,m + (1 - alpha) t_m t_m^T for every input node m."""
    if state.exact_rtt:
        return state
    t_vectors = np.asarray(t_vectors, dtype=float)
    expected = (state.num_inputs, state.feature_length)
    if t_vectors.shape != expected:
        raise DimensionMismatchError(f"t vectors have shape {t_vectors.shape}, expected {expected}.")
    alpha = state.forgetting
    outer = t_vectors[:, :, None] * t_vectors[:, None, :]
    return replace(state, r_tt_hat=alpha * state.r_tt_hat + (1.0 - alpha) * outer)


def _quadratic_norms(r_tt: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    quad = np.einsum("i,mij,j->m", gamma, r_tt, gamma)
    return np.sqrt(np.maximum(quad, 0.0))


def delta(state: EstimatorState, m: int) -> float:
    """sqrt(gamma^T R_tt,m gamma), negative round-off clamped to 0."""
    if not 0 <= m < state.num_inputs:
        raise DimensionMismatchError(f"Input node {m} outside 0..{state.num_inputs - 1}.")
    value = state.gamma_hat @ state.r_tt_hat[m] @ state.gamma_hat
    return float(np.sqrt(max(value, 0.0)))


def deltas(state: EstimatorState) -> np.ndarray:
    """Every Delta_m at once, shape (N,)."""
    return _quadratic_norms(state.r_tt_hat, state.gamma_hat)


def step(state: EstimatorState, s: np.ndarray, y_n: float) -> EstimatorState:
    """
    One subgradient step:
    gamma <- gamma + mu s (y_n - s^T gamma) - mu eta sum_m R_tt,m gamma / Delta_m,
    where a term with Delta_m = 0 contributes nothing.
    """
    s = np.asarray(s, dtype=float)
    if s.shape != state.gamma_hat.shape:
        raise DimensionMismatchError(f"Feature vector has shape {s.shape}, expected {state.gamma_hat.shape}.")

    gamma = state.gamma_hat
    error = y_n - s @ gamma
    update = state.step_size * error * s
    if state.reg_weight > 0:
        norms = _quadratic_norms(state.r_tt_hat, gamma)
        weights = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        regularizer = np.einsum("m,mij,j->i", weights, state.r_tt_hat, gamma)
        update = update - state.step_size * state.reg_weight * regularizer

    new_gamma = gamma + update
    if not np.all(np.isfinite(new_gamma)):
        raise DivergenceError("Coefficient vector became non-finite", state.iteration)
    return replace(state, gamma_hat=new_gamma, iteration=state.iteration + 1)


def read_topology(state: EstimatorState, thresholds: Union[float, Sequence[float]]) -> TopologyEstimate:
    """a_hat[m] = 1 iff Delta_m >= tau."""
    values = deltas(state)
    tau = np.broadcast_to(np.asarray(thresholds, dtype=float), values.shape).copy()
    if np.any(tau < 0):
        raise InvalidHyperparameterError("Thresholds must be nonnegative.")
    return TopologyEstimate(values, (values >= tau).astype(int), tau)


def largest_gap_threshold(values: np.ndarray) -> float:
    """
    Midpoint of the largest gap in the sorted values, with 0 prepended so a
    uniformly large set keeps every edge.
    """
    ordered = np.sort(np.concatenate([[0.0], np.asarray(values, dtype=float).ravel()]))
    gaps = np.diff(ordered)
    if gaps.size == 0 or gaps.max() == 0:
        return float(ordered[-1]) + 1.0
    i = int(np.argmax(gaps))
    return float(0.5 * (ordered[i] + ordered[i + 1]))


def save_snapshot(state: EstimatorState, path: Union[str, Path]) -> Path:
    """Checkpoint of gamma_hat and the iteration counter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "iteration": state.iteration,
        "gamma_hat": [float(g) for g in state.gamma_hat],
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_snapshot(path: Union[str, Path], state: EstimatorState) -> EstimatorState:
    """Restores gamma_hat and the iteration counter onto a compatible state."""
    payload = json.loads(Path(path).read_text())
    gamma = np.array(payload["gamma_hat"], dtype=float)
    if gamma.shape != state.gamma_hat.shape:
        raise DimensionMismatchError(
            f"Snapshot holds {gamma.size} coefficients, state expects {state.gamma_hat.size}.")
    return replace(state, gamma_hat=gamma, iteration=int(payload["iteration"]))
