"""
Reference computations the tests compare against: Monte-Carlo moment
estimates, a plain LMS filter and slow but simple batch solvers.
"""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import optimize

from src.topology_inference.batch_solver import BatchProblem
from src.topology_inference.gaussian_moments import MomentContext
from src.topology_inference.kernel import feature_batch

from tests.conftest import context_kernel_and_dictionary


@dataclass
class FeatureSample:
    S: np.ndarray      # (n, k_s)
    T: np.ndarray      # (n, N, k_s)
    y: np.ndarray      # (n,)


def sample_features(context: MomentContext, count: int, seed: int) -> FeatureSample:
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(context.input_covariance)
    ytilde = rng.standard_normal((count, L.shape[0])) @ L.T
    kernel, dictionary = context_kernel_and_dictionary(context)
    S, T = feature_batch(kernel, dictionary, ytilde[:, :-1])
    return FeatureSample(S, T, ytilde[:, -1])


def mean_and_stderr(values: np.ndarray):
    """Column-wise sample mean and standard error of the mean."""
    values = np.asarray(values, dtype=float)
    return values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])


def assert_within_stderr(estimate, stderr, exact, k: float = 5.0, atol: float = 1e-12):
    estimate, stderr, exact = np.broadcast_arrays(estimate, stderr, exact)
    gap = np.abs(estimate - exact)
    bad = gap > k * stderr + atol
    assert not np.any(bad), (
        f"{int(bad.sum())} entries outside {k} standard errors; worst gap/stderr "
        f"{np.max(gap / np.maximum(stderr, 1e-300)):.2f}")


def plain_lms(S: np.ndarray, y: np.ndarray, mu: float, gamma0: np.ndarray = None) -> np.ndarray:
    """Textbook LMS: returns the coefficients before each update, shape (n, k_s)."""
    gamma = np.zeros(S.shape[1]) if gamma0 is None else np.array(gamma0, dtype=float)
    trajectory = np.empty_like(S)
    for i, (s, target) in enumerate(zip(S, y)):
        trajectory[i] = gamma
        gamma = gamma + mu * s * (target - s @ gamma)
    return trajectory


def proximal_gradient_group_lasso(R: np.ndarray, r: np.ndarray, eta: float, groups: Sequence[Sequence[int]],
                                   iterations: int = 20000) -> np.ndarray:
    """Proximal gradient with exact block soft-thresholding, for disjoint coordinate groups."""
    step = 1.0 / np.linalg.eigvalsh(R)[-1]
    x = np.zeros_like(r)
    for _ in range(iterations):
        point = x - step * (R @ x - r)
        x = point.copy()
        for group in groups:
            block = point[list(group)]
            norm = np.linalg.norm(block)
            x[list(group)] = 0.0 if norm <= step * eta else (1.0 - step * eta / norm) * block
    return x


def slsqp_group_lasso(problem: BatchProblem, start: np.ndarray = None) -> np.ndarray:
    """
    Epigraph form: min 1/2 g^T R g - g^T r + eta sum t_m subject to
    t_m^2 >= ||C_m^T g||^2 and t_m >= 0.
    """
    k_s = problem.r_sy.size
    groups = len(problem.C)
    if start is None:
        start = np.linalg.solve(problem.R_ss, problem.r_sy)
    x0 = np.concatenate([start, [np.linalg.norm(C.T @ start) for C in problem.C]])

    def objective(x):
        g, t = x[:k_s], x[k_s:]
        return 0.5 * g @ problem.R_ss @ g - g @ problem.r_sy + problem.eta * t.sum()

    def gradient(x):
        g = x[:k_s]
        return np.concatenate([problem.R_ss @ g - problem.r_sy, problem.eta * np.ones(groups)])

    constraints: List[dict] = []
    for m, C in enumerate(problem.C):
        CCt = C @ C.T
        constraints.append({
            "type": "ineq",
            "fun": lambda x, m=m, CCt=CCt: x[k_s + m] ** 2 - x[:k_s] @ CCt @ x[:k_s],
            "jac": lambda x, m=m, CCt=CCt: np.concatenate([
                -2.0 * CCt @ x[:k_s], 2.0 * x[k_s + m] * np.eye(groups)[m]]),
        })
    bounds = [(None, None)] * k_s + [(0.0, None)] * groups
    result = optimize.minimize(objective, x0, jac=gradient, constraints=constraints, bounds=bounds,
                               method="SLSQP", options={"ftol": 1e-15, "maxiter": 2000})
    return result.x[:k_s]
