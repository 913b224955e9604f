"""
Transient and steady-state model of the online estimator.

The state tracks E{v(i)} and V(i) = E{v(i) v(i)^T} for the weight error
v(i) = gamma_hat(i) - gamma*. Fourth-order feature moments enter through the
MomentSet tables; the group regularizer enters through a Gaussian
approximation of gamma_hat with mean mu(i) and covariance Sigma(i).
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from src.topology_inference.errors import (
    DivergenceError,
    InstabilityError,
    MomentComputationError,
)
from src.topology_inference.gaussian_moments import MomentSet
from src.topology_inference.kernel import Dictionary, GaussianKernel, feature_batch

logger = logging.getLogger(__name__)

# Denominators below this are treated as zero (x / 0 = 0).
DENOMINATOR_FLOOR = 1e-14
RADICAND_TOLERANCE = 1e-10
RADIUS_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class TheoryState:
    mean_v: np.ndarray
    V: np.ndarray

    def gamma_mean(self, gamma_star: np.ndarray) -> np.ndarray:
        """mu(i) = E{gamma_hat(i)}."""
        return self.mean_v + gamma_star

    @property
    def Sigma(self) -> np.ndarray:
        return self.V - np.outer(self.mean_v, self.mean_v)


@dataclass(frozen=True, eq=False)
class SteadyStateInputs:
    F0: np.ndarray
    F1: np.ndarray
    Q5: np.ndarray


def initial_state(gamma0: np.ndarray, gamma_star: np.ndarray) -> TheoryState:
    v0 = np.asarray(gamma0, dtype=float) - gamma_star
    return TheoryState(v0, np.outer(v0, v0))


def stability_bound(R_ss: np.ndarray) -> float:
    """Mean-stability limit 2 / lambda_max(R_ss); inf for a zero matrix."""
    lambda_max = float(np.linalg.eigvalsh(0.5 * (R_ss + R_ss.T))[-1])
    if lambda_max <= 0:
        logger.warning("R_ss has no positive eigenvalue; the step-size bound is infinite.")
        return float("inf")
    return 2.0 / lambda_max


def optimal_error_moments(moments: MomentSet, gamma_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Returns (r_sy - R_ss gamma*, Q5) with Q5 = E{s s^T e0^2}, e0 = y_n - s^T gamma*.
    """
    cross = moments.r_sy - moments.R_ss @ gamma_star
    if not moments.has_fourth_order:
        raise MomentComputationError("Q5 needs fourth-order moments.")
    Q5 = (moments.T_ssyy
          - 2.0 * np.einsum("uvp,p->uv", moments.T_sssy, gamma_star)
          + np.einsum("uvlm,l,m->uv", moments.F, gamma_star, gamma_star))
    return cross, 0.5 * (Q5 + Q5.T)


def _radicand(R: np.ndarray, mean: np.ndarray, Sigma: np.ndarray) -> float:
    value = float(np.sum(R * Sigma.T) + mean @ R @ mean)
    scale = max(1.0, abs(float(np.sum(R * Sigma.T))), abs(float(mean @ R @ mean)))
    if value < -RADICAND_TOLERANCE * scale:
        raise MomentComputationError(f"Negative radicand {value:.3e} in the regularizer approximation.")
    return max(value, 0.0)


def regularizer_mean_term(moments: MomentSet, mu_vec: np.ndarray, Sigma: np.ndarray, m: int) -> np.ndarray:
    """E{R_tt,m gamma / Delta_m} ~ R_tt,m mu / sqrt(Tr{R_tt,m Sigma} + mu^T R_tt,m mu)."""
    R = moments.R_tt[m]
    denominator = np.sqrt(_radicand(R, mu_vec, Sigma))
    if denominator < DENOMINATOR_FLOOR:
        return np.zeros_like(mu_vec)
    return R @ mu_vec / denominator


class RecursionTerms:
    """Step-independent quantities shared by every recursion step."""

    def __init__(self, moments: MomentSet, gamma_star: np.ndarray, need_second_order: bool = True):
        self.moments = moments
        self.gamma_star = np.asarray(gamma_star, dtype=float)
        self.R_ss = moments.R_ss
        self.cross = moments.r_sy - moments.R_ss @ self.gamma_star
        self.identity = np.eye(moments.feature_length)
        if need_second_order:
            _, self.Q5 = optimal_error_moments(moments, self.gamma_star)
            # Q4[u, v] = sum_a E{v_a} G[u, a, v]
            self.G = moments.T_sssy - np.einsum("uavb,b->uav", moments.F, self.gamma_star)
            self.F1 = moments.F1_matrix()


def _terms(moments, gamma_star, terms: Optional[RecursionTerms], need_second_order: bool) -> RecursionTerms:
    if terms is None:
        return RecursionTerms(moments, gamma_star, need_second_order)
    return terms


def _sym(X: np.ndarray) -> np.ndarray:
    return X + X.T


def mean_step(state: TheoryState, moments: MomentSet, gamma_star: np.ndarray, mu: float, eta: float,
              terms: Optional[RecursionTerms] = None) -> np.ndarray:
    """E{v(i+1)} = (I - mu R_ss) E{v} + mu (r_sy - R_ss gamma*) - mu eta sum_m reg_m."""
    t = _terms(moments, gamma_star, terms, need_second_order=False)
    new_mean = state.mean_v - mu * (t.R_ss @ state.mean_v) + mu * t.cross
    if eta > 0:
        mean_gamma = state.gamma_mean(t.gamma_star)
        Sigma = state.Sigma
        regularizer = sum(regularizer_mean_term(moments, mean_gamma, Sigma, m)
                          for m in range(moments.num_inputs))
        new_mean = new_mean - mu * eta * regularizer
    return new_mean


def _regularizer_second_order(moments: MomentSet, state: TheoryState, gamma_star: np.ndarray):
    """
    Returns (Q7, g_bar, Q10) where Q7 ~ E{v g^T}, g_bar ~ E{g} and
    Q10 ~ E{g g^T} for g = sum_m R_tt,m gamma_hat / Delta_m.
    """
    mean_gamma = state.gamma_mean(gamma_star)
    Sigma = state.Sigma
    second = Sigma + np.outer(mean_gamma, mean_gamma)
    N = moments.num_inputs
    R_tt = moments.R_tt

    quadratic = np.array([mean_gamma @ R_tt[m] @ mean_gamma for m in range(N)])
    traces = np.array([np.sum(R_tt[m] * Sigma.T) for m in range(N)])
    radicands = np.array([_radicand(R_tt[m], mean_gamma, Sigma) for m in range(N)])
    roots = np.sqrt(radicands)

    k_s = mean_gamma.size
    Q7 = np.zeros((k_s, k_s))
    g_bar = np.zeros(k_s)
    for m in range(N):
        if roots[m] < DENOMINATOR_FLOOR:
            continue
        R_mu = R_tt[m] @ mean_gamma
        Q7 += (second @ R_tt[m] - np.outer(gamma_star, R_mu)) / roots[m]
        g_bar += R_mu / roots[m]

    Q10 = np.zeros((k_s, k_s))
    for m in range(N):
        for p in range(N):
            fourth = (4.0 * mean_gamma @ R_tt[m] @ Sigma @ R_tt[p] @ mean_gamma
                      + 2.0 * np.trace(R_tt[m] @ Sigma @ R_tt[p] @ Sigma)
                      + (quadratic[m] + traces[m]) * (quadratic[p] + traces[p]))
            if fourth < -RADICAND_TOLERANCE:
                raise MomentComputationError(f"Negative fourth-moment radicand {fourth:.3e}.")
            denominator = np.sqrt(max(fourth, 0.0))
            if denominator < DENOMINATOR_FLOOR:
                continue
            Q10 += R_tt[m] @ second @ R_tt[p] / denominator
    return Q7, g_bar, Q10


def mean_square_step(state: TheoryState, moments: MomentSet, gamma_star: np.ndarray, mu: float, eta: float,
                     terms: Optional[RecursionTerms] = None) -> np.ndarray:
    """
    V(i+1) = V - mu sym{V R} + mu sym{Q3} - mu^2 sym{Q4} + mu^2 Q6 + mu^2 Q5
             - mu eta sym{Q7} + mu^2 eta sym{R Q7} - mu^2 eta sym{Q9} + mu^2 eta^2 Q10.
    """
    t = _terms(moments, gamma_star, terms, need_second_order=True)
    V = state.V
    k_s = V.shape[0]

    Q3 = np.outer(state.mean_v, t.cross)
    Q4 = np.einsum("a,uav->uv", state.mean_v, t.G)
    Q6 = (t.F1 @ V.ravel(order="F")).reshape((k_s, k_s), order="F")

    new_V = (V - mu * _sym(V @ t.R_ss) + mu * _sym(Q3) - mu ** 2 * _sym(Q4)
             + mu ** 2 * Q6 + mu ** 2 * t.Q5)

    if eta > 0:
        Q7, g_bar, Q10 = _regularizer_second_order(moments, state, t.gamma_star)
        Q9 = np.outer(t.cross, g_bar)
        new_V = (new_V - mu * eta * _sym(Q7) + mu ** 2 * eta * _sym(t.R_ss @ Q7)
                 - mu ** 2 * eta * _sym(Q9) + mu ** 2 * eta ** 2 * Q10)

    return 0.5 * (new_V + new_V.T)


def msd(state: TheoryState) -> float:
    value = float(np.trace(state.V))
    if value < 0:
        if value < -1e-12 * max(1.0, np.linalg.norm(state.V)):
            logger.warning("Negative MSD %.3e clamped to zero.", value)
        return 0.0
    return value


def transition_matrix(moments: MomentSet, mu: float) -> np.ndarray:
    """F0 = I - mu (I kron R_ss + R_ss kron I) + mu^2 F1, acting on column-stacked vec(V)."""
    k_s = moments.feature_length
    identity = np.eye(k_s)
    return (np.eye(k_s * k_s) - mu * (np.kron(identity, moments.R_ss) + np.kron(moments.R_ss, identity))
            + mu ** 2 * moments.F1_matrix())


def mean_square_radius(moments: MomentSet, mu: float) -> float:
    """Spectral radius of F0; the eta = 0 recursion converges iff it is below one."""
    F0 = transition_matrix(moments, mu)
    eigenvalues = np.linalg.eigvalsh(0.5 * (F0 + F0.T))
    return float(max(abs(eigenvalues[0]), abs(eigenvalues[-1])))


def mean_square_step_limit(moments: MomentSet, upper: Optional[float] = None, iterations: int = 60) -> float:
    """
    Largest step size below `upper` (default: the mean-stability bound) for
    which F0 has spectral radius at most 1 + RADIUS_TOLERANCE, by bisection.
    The stable step sizes form an interval starting at zero.
    """
    if upper is None:
        upper = stability_bound(moments.R_ss)
    if not np.isfinite(upper):
        raise InstabilityError("No finite mean-stability bound to search below", float("inf"))
    threshold = 1.0 + RADIUS_TOLERANCE
    if mean_square_radius(moments, upper) <= threshold:
        return float(upper)
    low, high = 0.0, float(upper)
    for _ in range(iterations):
        middle = 0.5 * (low + high)
        if mean_square_radius(moments, middle) <= threshold:
            low = middle
        else:
            high = middle
    if low == 0.0:
        raise InstabilityError("Mean-square recursion is unstable for every step size",
                               mean_square_radius(moments, high))
    logger.debug("Mean-square step limit %.6g (mean bound %.6g).", low, upper)
    return low


def steady_state_inputs(moments: MomentSet, gamma_star: np.ndarray, mu: float) -> SteadyStateInputs:
    F0 = transition_matrix(moments, mu)
    _, Q5 = optimal_error_moments(moments, gamma_star)
    return SteadyStateInputs(F0, moments.F1_matrix(), Q5)


def steady_state_msd(moments: MomentSet, gamma_star: np.ndarray, mu: float) -> float:
    """
    Tr{unvec(mu^2 (I - F0)^{-1} vec(Q5))} for eta = 0, with column-stacking vec().
    """
    inputs = steady_state_inputs(moments, gamma_star, mu)
    radius = mean_square_radius(moments, mu)
    if radius >= 1.0:
        raise InstabilityError("Mean-square recursion is unstable for this step size", radius)
    k_s = moments.feature_length
    system = np.eye(k_s * k_s) - inputs.F0
    try:
        solution = linalg.solve(system, mu ** 2 * inputs.Q5.ravel(order="F"))
    except linalg.LinAlgError as e:
        raise InstabilityError(f"Steady-state system is singular: {e}", radius) from e
    V_inf = solution.reshape((k_s, k_s), order="F")
    return max(float(np.trace(V_inf)), 0.0)


@dataclass(frozen=True, eq=False)
class TheoryCurves:
    mean_v: np.ndarray      # (horizon, k_s)
    msd: np.ndarray         # (horizon,)
    gamma_star: np.ndarray

    @property
    def gamma_mean(self) -> np.ndarray:
        return self.mean_v + self.gamma_star


def run_theory(moments: MomentSet, gamma_star: np.ndarray, mu: float, eta: float, horizon: int,
               gamma0: Optional[np.ndarray] = None) -> TheoryCurves:
    """Iterates both recursions from gamma_hat(0) = gamma0 for `horizon` points."""
    gamma_star = np.asarray(gamma_star, dtype=float)
    if gamma0 is None:
        gamma0 = np.zeros_like(gamma_star)
    terms = RecursionTerms(moments, gamma_star)
    state = initial_state(gamma0, gamma_star)

    means = np.empty((horizon, gamma_star.size))
    curve = np.empty(horizon)
    for i in range(horizon):
        means[i] = state.mean_v
        curve[i] = msd(state)
        if i == horizon - 1:
            break
        new_mean = mean_step(state, moments, gamma_star, mu, eta, terms)
        new_V = mean_square_step(state, moments, gamma_star, mu, eta, terms)
        if not (np.all(np.isfinite(new_mean)) and np.all(np.isfinite(new_V))):
            raise DivergenceError("Theory recursion became non-finite", i + 1)
        state = TheoryState(new_mean, new_V)
    return TheoryCurves(means, curve, gamma_star)


def derivative_error_bound(kernel: GaussianKernel, dictionary: Dictionary, gamma_hat: np.ndarray,
                           gamma_star: np.ndarray) -> float:
    """
    Upper bound on |d f_hat / d y_m - d f* / d y_m| at any point and for any m:
    ||k_dm(., y)||_H * sqrt(sum_j ||phi_j||_H^2) * ||gamma_hat - gamma*||, where
    phi_j are the expansion sections (norm 1/sigma for derivative sections and
    1 for kernel sections) and ||k_dm(., y)||_H = 1/sigma.
    """
    N, D = dictionary.dimension, dictionary.size
    variance = kernel.variance
    section_norms = np.sqrt(D * (1.0 + N / variance))
    return float(section_norms / kernel.bandwidth * np.linalg.norm(np.asarray(gamma_hat) - gamma_star))


def derivative_gap(kernel: GaussianKernel, dictionary: Dictionary, gamma_hat: np.ndarray,
                   gamma_star: np.ndarray, points: np.ndarray, m: int) -> np.ndarray:
    """|t_m(y)^T (gamma_hat - gamma*)| at each row of `points`."""
    _, T = feature_batch(kernel, dictionary, points)
    return np.abs(T[:, m, :] @ (np.asarray(gamma_hat) - gamma_star))
