"""
Gaussian kernel, its derivatives, the per-sample feature vectors and the
dictionary that anchors the kernel expansion.

Index conventions (0-based throughout the code; configs and the CLI use
1-based node numbers and convert at the boundary):

* a dictionary holds D atoms, each a vector over the N input nodes;
* stacked index u = m * D + q addresses (input node m, atom q) inside
  z, zeta and every ell_m;
* s = [z; k] has length k_s = (N + 1) * D, and t_m = [ell_m; zeta_m] where
  zeta_m is the length-D block of zeta belonging to node m, so t_m has
  the same length k_s.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from src.topology_inference.errors import DimensionMismatchError, InvalidHyperparameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianKernel:
    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidHyperparameterError(f"Kernel bandwidth must be positive, got {self.bandwidth}.")

    @property
    def variance(self) -> float:
        return self.bandwidth ** 2


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Kernel arguments differ in shape: {a.shape} vs {b.shape}.")
    return a, b


def _check_component(m: int, dim: int):
    if not 0 <= m < dim:
        raise DimensionMismatchError(f"Component {m} outside dimension {dim}.")


def kernel_eval(kernel: GaussianKernel, a, b) -> float:
    """k(a, b) = exp(-||a - b||^2 / (2 sigma^2)); a and b must have the same shape."""
    a, b = _check_pair(a, b)
    return float(np.exp(-np.sum((a - b) ** 2) / (2 * kernel.variance)))


def kernel_grad_first_arg(kernel: GaussianKernel, a, b, m: int) -> float:
    """Partial derivative with respect to a_m."""
    a, b = _check_pair(a, b)
    _check_component(m, a.size)
    return kernel_eval(kernel, a, b) * (b[m] - a[m]) / kernel.variance


def kernel_grad_second_arg(kernel: GaussianKernel, a, b, m: int) -> float:
    """Partial derivative with respect to b_m."""
    return -kernel_grad_first_arg(kernel, a, b, m)


def kernel_second_cross(kernel: GaussianKernel, a, b, m1: int, m2: int) -> float:
    """Mixed derivative d^2 k(a, b) / (d b_m1 d a_m2), one partial per argument."""
    a, b = _check_pair(a, b)
    _check_component(m1, a.size)
    _check_component(m2, a.size)
    value = kernel_eval(kernel, a, b)
    d1 = a[m1] - b[m1]
    d2 = a[m2] - b[m2]
    delta = 1.0 if m1 == m2 else 0.0
    return -value * (d1 * d2 / kernel.variance ** 2 - delta / kernel.variance)


class DictionaryMode(str, Enum):
    GRID = "grid"
    COHERENCE = "coherence"


@dataclass(frozen=True, eq=False)
class Dictionary:
    """
    Ordered atoms anchoring the expansion. elements has shape (D, N).
    """
    elements: np.ndarray
    coherence_threshold: float = 0.0
    mode: DictionaryMode = DictionaryMode.GRID
    frozen: bool = True

    def __post_init__(self):
        elements = np.array(self.elements, dtype=float)
        if elements.ndim == 1:
            elements = elements.reshape(0, 0) if elements.size == 0 else elements[:, None]
        object.__setattr__(self, "elements", elements)
        if not 0.0 <= self.coherence_threshold < 1.0:
            raise InvalidHyperparameterError(
                f"Coherence threshold must lie in [0, 1), got {self.coherence_threshold}.")

    @property
    def size(self) -> int:
        return self.elements.shape[0]

    @property
    def dimension(self) -> int:
        return self.elements.shape[1] if self.elements.size else 0

    def feature_length(self) -> int:
        """k_s = (N + 1) D, the length of s and of every t_m."""
        return (self.dimension + 1) * self.size

    def save(self, path: Union[str, Path]) -> Path:
        """Writes one atom per line as whitespace-separated reals."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, self.elements, fmt="%.17g")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], coherence_threshold: float = 0.0,
             mode: DictionaryMode = DictionaryMode.GRID) -> "Dictionary":
        elements = np.loadtxt(path, dtype=float, ndmin=2)
        return cls(elements, coherence_threshold, mode, frozen=True)


def empty_dictionary(dimension: int, coherence_threshold: float) -> Dictionary:
    """Unfrozen, atom-free dictionary that grows through `dictionary_admit`."""
    return Dictionary(np.empty((0, dimension)), coherence_threshold, DictionaryMode.COHERENCE, frozen=False)


def dictionary_admit(dictionary: Dictionary, candidate, kernel: GaussianKernel) -> tuple[Dictionary, bool]:
    """
    Coherence rule: admit the candidate iff its largest kernel value against
    the stored atoms does not exceed the threshold. Returns the (possibly
    grown) dictionary and the admission flag. A frozen dictionary rejects
    every candidate.
    """
    candidate = np.asarray(candidate, dtype=float).ravel()
    if dictionary.frozen:
        logger.debug("Candidate offered to a frozen dictionary of %d atoms; rejected.", dictionary.size)
        return dictionary, False
    if dictionary.size == 0:
        return replace(dictionary, elements=candidate[None, :]), True
    if candidate.size != dictionary.dimension:
        raise DimensionMismatchError(
            f"Candidate has {candidate.size} entries, dictionary atoms have {dictionary.dimension}.")
    similarity = np.exp(-np.sum((dictionary.elements - candidate) ** 2, axis=1) / (2 * kernel.variance))
    if similarity.max() <= dictionary.coherence_threshold:
        return replace(dictionary, elements=np.vstack([dictionary.elements, candidate])), True
    return dictionary, False


def build_coherence_dictionary(kernel: GaussianKernel, candidates: Iterable[np.ndarray],
                               coherence_threshold: float, max_size: int) -> Dictionary:
    """Streams candidates through the coherence rule and freezes the result."""
    if max_size < 1:
        raise InvalidHyperparameterError(f"Dictionary size must be >= 1, got {max_size}.")
    candidates = iter(candidates)
    try:
        first = np.asarray(next(candidates), dtype=float).ravel()
    except StopIteration:
        raise DimensionMismatchError("No candidates to build a coherence dictionary from.") from None
    dictionary, _ = dictionary_admit(empty_dictionary(first.size, coherence_threshold), first, kernel)
    for candidate in candidates:
        if dictionary.size >= max_size:
            break
        dictionary, _ = dictionary_admit(dictionary, candidate, kernel)
    return replace(dictionary, frozen=True)


def dictionary_grid(dimension: int, count: int, bounds: tuple[float, float] = (-1.0, 1.0),
                    rng_seed: int = 0) -> Dictionary:
    """Draws `count` atoms uniformly in the hypercube bounds^dimension."""
    if count < 1:
        raise InvalidHyperparameterError(f"Dictionary size must be >= 1, got {count}.")
    low, high = bounds
    if not high > low:
        raise InvalidHyperparameterError(f"Empty dictionary bounds {bounds}.")
    rng = np.random.default_rng(rng_seed)
    return Dictionary(rng.uniform(low, high, size=(count, dimension)))


@dataclass(frozen=True, eq=False)
class FeatureVectors:
    """
    Per-sample quantities; ell holds ell_m as rows, shape (N, N * D).
    """
    k: np.ndarray
    z: np.ndarray
    zeta: np.ndarray
    ell: np.ndarray
    dictionary_size: int = field(repr=False)

    @property
    def s(self) -> np.ndarray:
        return np.concatenate([self.z, self.k])

    def t(self, m: int) -> np.ndarray:
        D = self.dictionary_size
        return np.concatenate([self.ell[m], self.zeta[m * D:(m + 1) * D]])

    @property
    def t_all(self) -> np.ndarray:
        """All t_m stacked as rows, shape (N, k_s)."""
        D = self.dictionary_size
        N = self.ell.shape[0]
        return np.hstack([self.ell, self.zeta.reshape(N, D)])


def compute_features(kernel: GaussianKernel, dictionary: Dictionary, y) -> FeatureVectors:
    """
    Features of one input vector y (length N) against every atom:

    * k[q] = k(y, x_q);
    * z[m * D + q] = d k(y, x_q) / d x_q,m, so zeta = -z holds the derivatives in y;
    * ell[m, m1 * D + q] = d^2 k(y, x_q) / (d x_q,m1 d y_m).

    `feature_batch` computes the same quantities for many inputs at once.
    """
    y = np.asarray(y, dtype=float).ravel()
    if dictionary.size == 0:
        raise DimensionMismatchError("Dictionary is empty.")
    if y.size != dictionary.dimension:
        raise DimensionMismatchError(
            f"Input has {y.size} entries, dictionary atoms have {dictionary.dimension}.")

    N, D = y.size, dictionary.size
    variance = kernel.variance
    diff = y[None, :] - dictionary.elements                     # (D, N)
    k = np.exp(-np.sum(diff ** 2, axis=1) / (2 * variance))    # (D,)
    z_blocks = (k[:, None] * diff / variance).T                # (N, D)
    z = z_blocks.reshape(-1)
    # ell[m, m1, q] = -k_q * (diff[q, m1] diff[q, m] / var^2 - delta(m1, m) / var)
    outer = diff.T[None, :, :] * diff.T[:, None, :]            # (N, N, D)
    ell = -k[None, None, :] * (outer / variance ** 2 - np.eye(N)[:, :, None] / variance)
    return FeatureVectors(k=k, z=z, zeta=-z, ell=ell.reshape(N, N * D), dictionary_size=D)


def feature_batch(kernel: GaussianKernel, dictionary: Dictionary, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Vectorized features for row-stacked inputs Y of shape (n, N).
    Returns S with shape (n, k_s) and T with shape (n, N, k_s).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != dictionary.dimension:
        raise DimensionMismatchError(
            f"Inputs have {Y.shape[1]} columns, dictionary atoms have {dictionary.dimension}.")
    n, N = Y.shape
    D = dictionary.size
    variance = kernel.variance
    diff = Y[:, None, :] - dictionary.elements[None, :, :]      # (n, D, N)
    k = np.exp(-np.sum(diff ** 2, axis=2) / (2 * variance))    # (n, D)
    z = np.transpose(k[:, :, None] * diff / variance, (0, 2, 1)).reshape(n, N * D)
    S = np.hstack([z, k])

    diff_t = np.transpose(diff, (0, 2, 1))                      # (n, N, D)
    outer = diff_t[:, None, :, :] * diff_t[:, :, None, :]       # (n, N_m, N_m1, D)
    ell = -k[:, None, None, :] * (outer / variance ** 2 - np.eye(N)[None, :, :, None] / variance)
    zeta = -z.reshape(n, N, D)
    T = np.concatenate([ell.reshape(n, N, N * D), zeta], axis=2)
    return S, T
