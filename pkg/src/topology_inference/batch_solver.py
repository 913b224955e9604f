import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy import linalg

from src.topology_inference.errors import DimensionMismatchError, InvalidHyperparameterError, NotPositiveSemidefiniteError

logger = logging.getLogger(__name__)

RIDGE = 1e-10


def factor_Rtt(R_tt: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root C with C C^T = R_tt; eigenvalues floored at 0."""
    R = 0.5 * (np.asarray(R_tt, dtype=float) + np.asarray(R_tt, dtype=float).T)
    eigenvalues, eigenvectors = linalg.eigh(R)
    lambda_max = max(float(eigenvalues[-1]), 0.0)
    if eigenvalues[0] < -1e-8 * lambda_max or (lambda_max == 0.0 and eigenvalues[0] < 0.0):
        raise NotPositiveSemidefiniteError(
            f"Matrix has eigenvalue {eigenvalues[0]:.3e} against lambda_max {lambda_max:.3e}.")
    root = np.sqrt(np.clip(eigenvalues, 0.0, None))
    C = (eigenvectors * root) @ eigenvectors.T
    return 0.5 * (C + C.T)


@dataclass(eq=False)
class BatchProblem:
    """min_gamma 1/2 gamma^T R_ss gamma - gamma^T r_sy + eta sum_m ||C_m^T gamma||."""
    R_ss: np.ndarray
    r_sy: np.ndarray
    eta: float
    C: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.R_ss = 0.5 * (np.asarray(self.R_ss, dtype=float) + np.asarray(self.R_ss, dtype=float).T)
        self.r_sy = np.asarray(self.r_sy, dtype=float).ravel()
        if self.R_ss.shape != (self.r_sy.size, self.r_sy.size):
            raise DimensionMismatchError(f"R_ss {self.R_ss.shape} does not match r_sy of length {self.r_sy.size}.")
        if self.eta < 0:
            raise InvalidHyperparameterError(f"eta must be nonnegative, got {self.eta}.")
        for C in self.C:
            if C.shape != self.R_ss.shape:
                raise DimensionMismatchError(f"Group factor has shape {C.shape}, expected {self.R_ss.shape}.")

    @classmethod
    def from_moments(cls, R_ss: np.ndarray, r_sy: np.ndarray, R_tt: Sequence[np.ndarray], eta: float) -> "BatchProblem":
        return cls(R_ss, r_sy, eta, [factor_Rtt(R) for R in R_tt])

    def objective(self, gamma: np.ndarray) -> float:
        smooth = 0.5 * gamma @ self.R_ss @ gamma - gamma @ self.r_sy
        return float(smooth + self.eta * sum(np.linalg.norm(C.T @ gamma) for C in self.C))


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    residual: float
    tolerance: float
    objective: float
    method: str


def _ridge_solve(R: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lambda_max = max(float(np.linalg.eigvalsh(R)[-1]), 0.0)
    try:
        factor = linalg.cho_factor(R, lower=True)
        return linalg.cho_solve(factor, rhs)
    except linalg.LinAlgError:
        ridge = RIDGE * (lambda_max if lambda_max > 0 else 1.0)
        logger.warning("R_ss is singular; solving with ridge %.3e.", ridge)
        return linalg.solve(R + ridge * np.eye(R.shape[0]), rhs, assume_a="pos")


def optimality_residual(problem: BatchProblem, gamma: np.ndarray, group_subgradients: Sequence[np.ndarray],
                        zero_tol: float = 1e-12, zero_groups: Sequence[bool] = None) -> float:
    """
    Norm of one element of the subdifferential at gamma. Groups flagged in
    zero_groups (or with ||C_m^T gamma|| <= zero_tol) use the supplied
    subgradient, projected to the unit ball.
    """
    if zero_groups is None:
        zero_groups = [np.linalg.norm(C.T @ gamma) <= zero_tol for C in problem.C]
    g = problem.R_ss @ gamma - problem.r_sy
    for C, w, is_zero in zip(problem.C, group_subgradients, zero_groups):
        u = C.T @ gamma
        norm = np.linalg.norm(u)
        if not is_zero and norm > 0:
            g = g + problem.eta * C @ (u / norm)
        else:
            w_norm = np.linalg.norm(w)
            g = g + problem.eta * C @ (w / w_norm if w_norm > 1.0 else w)
    return float(np.linalg.norm(g))


def solve_gamma_star(problem: BatchProblem, tol: float = 1e-9, max_iter: int = 50000,
                     rho: float = None, check_every: int = 25) -> tuple[np.ndarray, ConvergenceReport]:
    """
    eta = 0: closed form R_ss^{-1} r_sy. eta > 0: ADMM on the split
    u_m = C_m^T gamma with residual balancing of the penalty rho; stops once
    the subgradient residual is <= tol * (1 + ||r_sy||).
    """
    R, r, eta = problem.R_ss, problem.r_sy, problem.eta
    threshold = tol * (1.0 + np.linalg.norm(r))

    if eta == 0 or not problem.C:
        gamma = _ridge_solve(R, r)
        residual = float(np.linalg.norm(R @ gamma - r))
        report = ConvergenceReport(residual <= max(threshold, 1e-8 * (1 + np.linalg.norm(r))), 0, residual,
                                   threshold, problem.objective(gamma), "closed-form")
        return gamma, report

    k_s = r.size
    groups = len(problem.C)
    C_stack = np.hstack(problem.C)                       # (k_s, groups * k_s)
    sum_CCt = sum(C @ C.T for C in problem.C)
    if rho is None:
        rho = max(np.trace(R), 1e-12) / max(np.trace(sum_CCt), 1e-12)

    gamma = _ridge_solve(R + RIDGE * np.eye(k_s), r)
    u = np.stack([C.T @ gamma for C in problem.C])       # (groups, k_s)
    w = np.zeros_like(u)                                 # scaled dual variables

    def factorize(penalty):
        return linalg.cho_factor(R + penalty * sum_CCt + RIDGE * np.eye(k_s), lower=True)

    factor = factorize(rho)
    residual = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        rhs = r + rho * C_stack @ (u - w).reshape(-1)
        gamma = linalg.cho_solve(factor, rhs)

        Ct_gamma = np.stack([C.T @ gamma for C in problem.C])
        u_old = u
        shifted = Ct_gamma + w
        norms = np.linalg.norm(shifted, axis=1)
        shrink = np.maximum(0.0, 1.0 - (eta / rho) / np.where(norms > 0, norms, np.inf))
        u = shrink[:, None] * shifted
        w = w + Ct_gamma - u

        if iteration % check_every == 0:
            subgradients = [rho * w[m] / eta for m in range(groups)]
            residual = optimality_residual(problem, gamma, subgradients,
                                           zero_groups=[not np.any(u[m]) for m in range(groups)])
            if residual <= threshold:
                break

            primal = np.linalg.norm(Ct_gamma - u)
            dual = rho * np.linalg.norm(C_stack @ (u - u_old).reshape(-1))
            if primal > 10.0 * dual:
                rho *= 2.0
                w = w / 2.0
                factor = factorize(rho)
            elif dual > 10.0 * primal:
                rho /= 2.0
                w = w * 2.0
                factor = factorize(rho)

    converged = residual <= threshold
    if not converged:
        logger.warning("ADMM stopped after %d iterations with residual %.3e (target %.3e).",
                       iteration, residual, threshold)
    else:
        logger.debug("ADMM converged in %d iterations, residual %.3e.", iteration, residual)
    return gamma, ConvergenceReport(converged, iteration, float(residual), float(threshold),
                                    problem.objective(gamma), "admm")
