import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import linalg

from src.topology_inference.errors import (
    DimensionMismatchError,
    ModelConstructionError,
    SamplingError,
)

logger = logging.getLogger(__name__)

# Five-node reference graph; row n lists the nodes feeding node n.
REFERENCE_LINEAR_ADJACENCY = np.array([
    [0, 1, 0, 1, 1],
    [1, 0, 1, 0, 1],
    [1, 0, 0, 1, 0],
    [0, 1, 1, 0, 1],
    [1, 0, 1, 1, 0],
], dtype=float)

REFERENCE_NONLINEAR_ADJACENCY = np.array([
    [0, 0, 1],
    [1, 0, 1],
    [1, 0, 0],
], dtype=float)


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """
    Square graph adjacency: entries[n, m] != 0 iff node m feeds node n.
    Binary by default; weighted matrices are allowed for custom linear models.
    """
    entries: np.ndarray
    binary: bool = True

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ModelConstructionError(f"Adjacency must be square, got shape {entries.shape}.")
        if not np.all(np.isfinite(entries)):
            raise ModelConstructionError("Adjacency contains non-finite entries.")
        if np.any(np.diag(entries) != 0):
            raise ModelConstructionError("Adjacency must have a zero diagonal (no self-loops).")
        if self.binary and not np.all(np.isin(entries, (0.0, 1.0))):
            raise ModelConstructionError("Binary adjacency entries must be 0 or 1.")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def parents_row(self, node: int) -> np.ndarray:
        """Binary indicator of the nodes feeding `node` (0-based), with `node` itself removed."""
        row = np.delete(self.entries[node], node)
        return (row != 0).astype(int)


@dataclass(frozen=True, eq=False)
class LinearSignalModel:
    """y = A y + v with v ~ N(0, noise_std^2 I)."""
    adjacency: AdjacencyMatrix
    noise_std: float
    input_covariance: np.ndarray
    cholesky_factor: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.size


@dataclass(frozen=True, eq=False)
class NonlinearSignalModel:
    """
    Three-node implicit model y = f(y) + rho with rho ~ N(0, I3).
    Samples are obtained as y = (id - f)^{-1}(rho).
    """
    adjacency: AdjacencyMatrix = field(
        default_factory=lambda: AdjacencyMatrix(REFERENCE_NONLINEAR_ADJACENCY))
    k1: float = 8000.0
    k2: float = 27.0
    damping: float = 0.5
    max_iter: int = 500
    tol: float = 1e-10
    singular_guard: float = 1e-8

    @property
    def num_nodes(self) -> int:
        return 3

    @property
    def ratio(self) -> float:
        return self.k1 / self.k2


SignalModel = Union[LinearSignalModel, NonlinearSignalModel]


def build_linear_model(adjacency: Union[AdjacencyMatrix, np.ndarray], noise_std: float) -> LinearSignalModel:
    """
    Builds the linear structural model and its exact covariance
    R_yy = (I - A)^{-1} R_vv (I - A)^{-T}.
    """
    if not isinstance(adjacency, AdjacencyMatrix):
        adjacency = AdjacencyMatrix(np.asarray(adjacency, dtype=float), binary=False)
    if not noise_std > 0:
        raise ModelConstructionError(f"noise_std must be positive, got {noise_std}.")

    size = adjacency.size
    system = np.eye(size) - adjacency.entries
    try:
        lu = linalg.lu_factor(system, check_finite=True)
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(system).max())):
            raise linalg.LinAlgError("zero pivot")
        mixing = linalg.lu_solve(lu, np.eye(size))
    except (linalg.LinAlgError, ValueError) as e:
        raise ModelConstructionError(f"I - A is singular: {e}") from e

    covariance = noise_std ** 2 * mixing @ mixing.T
    covariance = 0.5 * (covariance + covariance.T)
    try:
        cholesky_factor = linalg.cholesky(covariance, lower=True)
    except linalg.LinAlgError as e:
        raise ModelConstructionError(f"Model covariance is not positive definite: {e}") from e

    return LinearSignalModel(adjacency, float(noise_std), covariance, cholesky_factor)


def sample_linear(model: LinearSignalModel, rng_seed: int, count: int) -> np.ndarray:
    """
    Draws `count` i.i.d. graph signals N(0, R_yy); one row per time instant.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}.")
    rng = np.random.default_rng(rng_seed)
    Z = rng.standard_normal((count, model.num_nodes))
    return Z @ model.cholesky_factor.T


def nonlinear_map(model: NonlinearSignalModel, y: np.ndarray) -> np.ndarray:
    """Evaluates f(y) literally."""
    y1, y2, y3 = np.asarray(y, dtype=float)
    w = model.ratio * (y3 + y1) ** 3 / y1
    with np.errstate(over="ignore"):
        denominator = (0.5 + np.exp(w)) ** 5 + 1.0
    return np.array([
        y1 - w,
        y2 + (y2 - w) / denominator,
        y3 + y1 + w,
    ])


def identity_minus_map(model: NonlinearSignalModel, y: np.ndarray) -> np.ndarray:
    """
    Evaluates (id - f)(y) in simplified form, which avoids the cancellation
    y2 - f2(y) suffers when y2 is large.
    """
    y1, y2, y3 = np.asarray(y, dtype=float)
    w = model.ratio * (y3 + y1) ** 3 / y1
    with np.errstate(over="ignore"):
        denominator = (0.5 + np.exp(w)) ** 5 + 1.0
    return np.array([w, -(y2 - w) / denominator, -y1 - w])


def _identity_minus_jacobian(model: NonlinearSignalModel, y: np.ndarray) -> np.ndarray:
    y1, y2, y3 = y
    c = model.ratio
    s = y3 + y1
    w = c * s ** 3 / y1
    dw_dy1 = c * (3 * s ** 2 / y1 - s ** 3 / y1 ** 2)
    dw_dy3 = 3 * c * s ** 2 / y1
    with np.errstate(over="ignore"):
        base = 0.5 + np.exp(w)
        denominator = base ** 5 + 1.0
        d_denominator = 5 * base ** 4 * np.exp(w)
    dg2_dw = 1.0 / denominator + (y2 - w) * d_denominator / denominator ** 2
    return np.array([
        [dw_dy1, 0.0, dw_dy3],
        [dg2_dw * dw_dy1, -1.0 / denominator, dg2_dw * dw_dy3],
        [-1.0 - dw_dy1, 0.0, -dw_dy3],
    ])


def _explicit_inverse(model: NonlinearSignalModel, rho: np.ndarray) -> np.ndarray:
    # The first and third equations fix w = rho1 and y1 = -rho1 - rho3,
    # after which y3 and y2 follow in closed form.
    rho1, rho2, rho3 = rho
    y1 = -rho1 - rho3
    y3 = np.cbrt(rho1 * y1 / model.ratio) - y1
    with np.errstate(over="ignore"):
        y2 = rho1 - rho2 * ((0.5 + np.exp(rho1)) ** 5 + 1.0)
    return np.array([y1, y2, y3])


def solve_inverse(model: NonlinearSignalModel, rho: np.ndarray) -> np.ndarray:
    """
    Solves (id - f)(y) = rho with a damped Newton iteration started from the
    explicit inverse. Raises SamplingError when y1 is at the singularity or
    the residual does not reach model.tol.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (3,):
        raise DimensionMismatchError(f"Noise draw must have 3 entries, got shape {rho.shape}.")

    y = _explicit_inverse(model, rho)
    for iteration in range(model.max_iter + 1):
        if not np.all(np.isfinite(y)) or abs(y[0]) < model.singular_guard:
            raise SamplingError(f"Root finding reached the y1 singularity for noise {rho}.", rho)
        residual = identity_minus_map(model, y) - rho
        if np.linalg.norm(residual) <= model.tol:
            return y
        if iteration == model.max_iter:
            break
        try:
            direction = linalg.solve(_identity_minus_jacobian(model, y), residual)
        except (linalg.LinAlgError, ValueError) as e:
            raise SamplingError(f"Singular Jacobian while inverting noise {rho}: {e}", rho) from e
        y = y - model.damping * direction

    raise SamplingError(
        f"Root finding did not converge in {model.max_iter} iterations for noise {rho} "
        f"(residual {np.linalg.norm(residual):.3e}).", rho)


def sample_nonlinear(model: NonlinearSignalModel, rng_seed: int, count: int) -> np.ndarray:
    """
    Draws `count` i.i.d. graph signals from the implicit nonlinear model.
    Noise draws landing within singular_guard of y1 = 0 are redrawn.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}.")
    rng = np.random.default_rng(rng_seed)
    samples = np.empty((count, 3))
    redraws = 0
    for i in range(count):
        while True:
            rho = rng.standard_normal(3)
            if abs(rho[0] + rho[2]) >= model.singular_guard:
                break
            redraws += 1
        samples[i] = solve_inverse(model, rho)
    if redraws:
        logger.debug("Redrew %d noise samples near the y1 singularity.", redraws)
    return samples


def sample_signals(model: SignalModel, rng_seed: int, count: int) -> np.ndarray:
    if isinstance(model, LinearSignalModel):
        return sample_linear(model, rng_seed, count)
    return sample_nonlinear(model, rng_seed, count)


def estimate_covariance(samples: np.ndarray) -> np.ndarray:
    """Zero-mean empirical covariance of row-stacked samples."""
    samples = np.asarray(samples, dtype=float)
    covariance = samples.T @ samples / samples.shape[0]
    return 0.5 * (covariance + covariance.T)


def node_order(num_nodes: int, node: int) -> np.ndarray:
    """Permutation placing every other node first (in order) and `node` (0-based) last."""
    if not 0 <= node < num_nodes:
        raise DimensionMismatchError(f"Node {node} outside a graph of {num_nodes} nodes.")
    return np.array([m for m in range(num_nodes) if m != node] + [node])


def reorder_for_node(covariance: np.ndarray, node: int) -> np.ndarray:
    """Covariance of the stacked vector [inputs; y_node] used by the moment engine."""
    order = node_order(covariance.shape[0], node)
    return covariance[np.ix_(order, order)]


def split_node(samples: np.ndarray, node: int) -> tuple[np.ndarray, np.ndarray]:
    """Splits samples into the N input columns and the target column of `node`."""
    order = node_order(samples.shape[1], node)
    return samples[:, order[:-1]], samples[:, node]
