"""
Closed-form Gaussian moments of kernel features, with a sampled fallback.

Every expectation needed by the convergence model has the form

    E{ prod_j k(y, x_j) * prod_i (ytilde_{h_i} - offset_i) }

over ytilde = [y; y_n] ~ N(0, R), with at most four kernels and four linear
factors. Multiplying the kernels completes a square, leaving a scale factor
and a moment of a shifted Gaussian N(mean', cov') that the Isserlis expansion
evaluates exactly. `nu` exposes this with explicit selector flags; the table
builders expand each feature into monomials and reuse one cached Gaussian
block per multiset of atoms.
"""
import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from src.topology_inference.errors import DimensionMismatchError, MomentComputationError
from src.topology_inference.kernel import Dictionary, GaussianKernel, feature_batch

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
# Float64 entries held per chunk while averaging sampled features.
SAMPLE_CHUNK_ENTRIES = 4_000_000
VALID_C_PATTERNS = {(1, 1, 1), (0, 1, 1), (0, 0, 1), (0, 0, 0)}

# (ytilde index, atom index or None, atom component); None means a zero offset.
Factor = Tuple[int, Optional[int], int]
# (coefficient, atoms, factors)
Monomial = Tuple[float, Tuple[int, ...], Tuple[Factor, ...]]


def gaussian_product_moment(mean: np.ndarray, cov: np.ndarray, indices: Sequence[int],
                            offsets: Optional[Sequence[float]] = None) -> float:
    """
    E{ prod_i (x_{indices[i]} - offsets[i]) } for x ~ N(mean, cov), up to four factors.
    """
    if len(indices) > 4:
        raise ValueError(f"At most 4 active indices are supported, got {len(indices)}.")
    if offsets is None:
        offsets = [0.0] * len(indices)
    shifted = [float(mean[h]) - float(o) for h, o in zip(indices, offsets)]
    pair = [[float(cov[a, b]) for b in indices] for a in indices]
    return _isserlis(tuple(range(len(indices))), shifted, pair)


def _isserlis(slots: Tuple[int, ...], means, pair) -> float:
    if not slots:
        return 1.0
    first, rest = slots[0], slots[1:]
    total = means[first] * _isserlis(rest, means, pair)
    for k, other in enumerate(rest):
        total += pair[first][other] * _isserlis(rest[:k] + rest[k + 1:], means, pair)
    return total


def _graded_inverse(R: np.ndarray) -> Tuple[np.ndarray, float]:
    """Inverse and log-determinant of an SPD matrix via its correlation matrix."""
    scale = np.sqrt(np.diag(R))
    if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
        raise MomentComputationError("Input covariance has a nonpositive diagonal.")
    correlation = R / np.outer(scale, scale)
    try:
        factor = linalg.cho_factor(correlation, lower=True)
    except linalg.LinAlgError as e:
        raise MomentComputationError(f"Input covariance is not positive definite: {e}") from e
    inverse = linalg.cho_solve(factor, np.eye(R.shape[0])) / np.outer(scale, scale)
    logdet = 2.0 * np.sum(np.log(scale)) + 2.0 * np.sum(np.log(np.diag(factor[0])))
    return 0.5 * (inverse + inverse.T), float(logdet)


@dataclass(frozen=True)
class NuParameters:
    """
    Selector flags c = (c1, c2, c3), atom slots (p, q, r, s), index pairs
    h = (h1, ..., h8) and activity flags iota = (iota1, ..., iota4).

    Factor j (when iota_j = 1) is (ytilde[h_{2j-1}] - x4[h_{2j}]); h_{2j} = None
    means a zero offset, used for y_n factors. Slot weights are
    (1, c3, c3 c2, c3 c2 c1); atoms in zero-weight slots only serve as offsets.
    """
    c: Tuple[int, int, int]
    atoms: Tuple[Optional[int], Optional[int], Optional[int], Optional[int]]
    h: Tuple[Optional[int], ...] = (None,) * 8
    iota: Tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def weights(self) -> Tuple[int, int, int, int]:
        c1, c2, c3 = self.c
        return (1, c3, c3 * c2, c3 * c2 * c1)

    @classmethod
    def for_product(cls, atoms: Sequence[int], factors: Sequence[Tuple[int, Optional[int]]]) -> "NuParameters":
        """
        Parameters for a product of len(atoms) kernels and the given factors,
        each (ytilde index, x4 position or None).
        """
        patterns = {1: (0, 0, 0), 2: (0, 0, 1), 3: (0, 1, 1), 4: (1, 1, 1)}
        if len(atoms) not in patterns:
            raise ValueError(f"Between 1 and 4 kernels are supported, got {len(atoms)}.")
        if len(factors) > 4:
            raise ValueError(f"At most 4 factors are supported, got {len(factors)}.")
        slots = tuple(atoms) + (None,) * (4 - len(atoms))
        h: list = [None] * 8
        iota = [0, 0, 0, 0]
        for j, (index, offset) in enumerate(factors):
            h[2 * j], h[2 * j + 1], iota[j] = index, offset, 1
        return cls(patterns[len(atoms)], slots, tuple(h), tuple(iota))

    def validate(self, num_inputs: int, dictionary_size: int):
        if tuple(self.c) not in VALID_C_PATTERNS:
            raise ValueError(f"Selector flags {self.c} match none of the supported cases.")
        for weight, atom in zip(self.weights, self.atoms):
            if weight and atom is None:
                raise ValueError("An active kernel slot has no atom.")
            if atom is not None and not 0 <= atom < dictionary_size:
                raise ValueError(f"Atom index {atom} outside 0..{dictionary_size - 1}.")
        for j, active in enumerate(self.iota):
            if not active:
                continue
            index, offset = self.h[2 * j], self.h[2 * j + 1]
            if index is None or not 0 <= index <= num_inputs:
                raise ValueError(f"Factor {j} has an invalid ytilde index {index}.")
            if offset is not None:
                if not 0 <= offset < 4 * num_inputs:
                    raise ValueError(f"Factor {j} has an invalid offset index {offset}.")
                if self.atoms[offset // num_inputs] is None:
                    raise ValueError(f"Factor {j} takes its offset from an empty atom slot.")


@dataclass(eq=False)
class MomentContext:
    """
    input_covariance is the covariance of ytilde = [inputs; y_n], shape (N+1, N+1);
    atoms are the dictionary elements, shape (D, N).
    """
    input_covariance: np.ndarray
    bandwidth: float
    atoms: np.ndarray
    max_condition: float = MAX_CONDITION
    _blocks: Dict[tuple, tuple] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        R = np.array(self.input_covariance, dtype=float)
        atoms = np.array(self.atoms, dtype=float)
        if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 2:
            raise DimensionMismatchError(f"Input covariance must be square with size >= 2, got {R.shape}.")
        if atoms.ndim != 2 or atoms.shape[1] != R.shape[0] - 1 or atoms.shape[0] < 1:
            raise DimensionMismatchError(
                f"Atoms of shape {atoms.shape} do not match {R.shape[0] - 1} input nodes.")
        if not np.allclose(R, R.T, rtol=1e-10, atol=1e-14 * np.abs(R).max()):
            raise MomentComputationError("Input covariance is not symmetric.")
        if not self.bandwidth > 0:
            raise MomentComputationError(f"Kernel bandwidth must be positive, got {self.bandwidth}.")
        self.input_covariance = 0.5 * (R + R.T)
        self.atoms = atoms
        self._inverse, self._logdet = _graded_inverse(self.input_covariance)

    @classmethod
    def from_dictionary(cls, input_covariance: np.ndarray, kernel: GaussianKernel,
                        dictionary: Dictionary) -> "MomentContext":
        return cls(input_covariance, kernel.bandwidth, dictionary.elements)

    @property
    def num_inputs(self) -> int:
        return self.atoms.shape[1]

    @property
    def dictionary_size(self) -> int:
        return self.atoms.shape[0]

    @property
    def feature_length(self) -> int:
        return (self.num_inputs + 1) * self.dictionary_size

    def stacked_atoms(self, slots: Sequence[Optional[int]]) -> np.ndarray:
        """x4 = [x_p; x_q; x_r; x_s] with zeros for empty slots."""
        N = self.num_inputs
        x4 = np.zeros(4 * N)
        for j, atom in enumerate(slots):
            if atom is not None:
                x4[j * N:(j + 1) * N] = self.atoms[atom]
        return x4

    def gaussian_block(self, weights: Sequence[int], x4: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """
        Completes the square for the weighted kernel product. Returns the log of
        the scale factor and the mean and covariance of the tilted Gaussian.
        """
        N = self.num_inputs
        variance = self.bandwidth ** 2
        weights = np.asarray(weights, dtype=float)
        c4 = weights.sum() / variance
        B0 = np.diag(np.r_[np.ones(N), 0.0])
        M = c4 * B0 + self._inverse
        M = 0.5 * (M + M.T)

        eigenvalues = np.linalg.eigvalsh(M)
        if eigenvalues[0] <= 0:
            raise MomentComputationError("Tilted precision matrix is not positive definite.", np.inf)
        condition = eigenvalues[-1] / eigenvalues[0]
        if condition > self.max_condition:
            raise MomentComputationError("Tilted precision matrix is ill-conditioned.", condition)

        factor = linalg.cho_factor(M, lower=True)
        cov = linalg.cho_solve(factor, np.eye(N + 1))
        cov = 0.5 * (cov + cov.T)
        logdet_M = 2.0 * np.sum(np.log(np.diag(factor[0])))

        B4 = np.zeros((N + 1, 4 * N))
        B4[:N, :] = -np.hstack([w * np.eye(N) for w in weights]) / variance
        Q4 = -np.diag(np.repeat(weights, N)) / variance
        mean = -cov @ (B4 @ x4)
        exponent = 0.5 * x4 @ (Q4 + B4.T @ cov @ B4) @ x4
        log_scale = -0.5 * self._logdet - 0.5 * logdet_M + exponent
        return float(log_scale), mean, cov

    def block_for_atoms(self, atoms: Tuple[int, ...]) -> Tuple[float, np.ndarray, np.ndarray]:
        key = tuple(sorted(atoms))
        block = self._blocks.get(key)
        if block is None:
            weights = [1] * len(key) + [0] * (4 - len(key))
            log_scale, mean, cov = self.gaussian_block(weights, self.stacked_atoms(key + (None,) * (4 - len(key))))
            block = (np.exp(log_scale), mean, cov)
            self._blocks[key] = block
        return block

    def expect(self, monomial: Monomial) -> float:
        coef, atoms, factors = monomial
        if coef == 0.0:
            return 0.0
        indices = [h for h, _, _ in factors]
        offsets = [0.0 if q is None else self.atoms[q, comp] for _, q, comp in factors]
        if not atoms:
            return coef * gaussian_product_moment(np.zeros(self.num_inputs + 1),
                                                  self.input_covariance, indices, offsets)
        scale, mean, cov = self.block_for_atoms(atoms)
        return coef * scale * gaussian_product_moment(mean, cov, indices, offsets)


def nu(context: MomentContext, params: NuParameters) -> float:
    """Closed-form value of the generic kernel-product expectation."""
    params.validate(context.num_inputs, context.dictionary_size)
    x4 = context.stacked_atoms(params.atoms)
    log_scale, mean, cov = context.gaussian_block(params.weights, x4)
    indices, offsets = [], []
    for j, active in enumerate(params.iota):
        if active:
            indices.append(params.h[2 * j])
            offset = params.h[2 * j + 1]
            offsets.append(0.0 if offset is None else x4[offset])
    return float(np.exp(log_scale) * gaussian_product_moment(mean, cov, indices, offsets))


class FeatureAlgebra:
    """Expands s_u, t_m,u and y_n into monomials over one context."""

    def __init__(self, context: MomentContext):
        self.context = context
        self.N = context.num_inputs
        self.D = context.dictionary_size
        self.variance = context.bandwidth ** 2
        self._s_cache: Dict[int, Tuple[Monomial, ...]] = {}
        self._t_cache: Dict[Tuple[int, int], Tuple[Monomial, ...]] = {}
        self.y_terms: Tuple[Monomial, ...] = ((1.0, (), ((self.N, None, 0),)),)

    def s_terms(self, u: int) -> Tuple[Monomial, ...]:
        terms = self._s_cache.get(u)
        if terms is None:
            N, D = self.N, self.D
            if u < N * D:
                m, q = divmod(u, D)
                terms = ((1.0 / self.variance, (q,), ((m, q, m),)),)
            else:
                terms = ((1.0, (u - N * D,), ()),)
            self._s_cache[u] = terms
        return terms

    def t_terms(self, m: int, j: int) -> Tuple[Monomial, ...]:
        terms = self._t_cache.get((m, j))
        if terms is None:
            N, D, var = self.N, self.D, self.variance
            if j < N * D:
                m1, q = divmod(j, D)
                terms = ((-1.0 / var ** 2, (q,), ((m1, q, m1), (m, q, m))),)
                if m1 == m:
                    terms = terms + ((1.0 / var, (q,), ()),)
            else:
                q = j - N * D
                terms = ((-1.0 / var, (q,), ((m, q, m),)),)
            self._t_cache[(m, j)] = terms
        return terms

    def expectation(self, *term_lists: Tuple[Monomial, ...]) -> float:
        total = 0.0
        for combo in itertools.product(*term_lists):
            coef = 1.0
            atoms: Tuple[int, ...] = ()
            factors: Tuple[Factor, ...] = ()
            for c, a, f in combo:
                coef *= c
                atoms += a
                factors += f
            total += self.context.expect((coef, atoms, factors))
        return total


def _symmetric_matrix(size: int, entry) -> np.ndarray:
    out = np.empty((size, size))
    for u in range(size):
        for v in range(u, size):
            out[u, v] = out[v, u] = entry(u, v)
    return out


def compute_R_ss(context: MomentContext) -> np.ndarray:
    """E{s s^T}."""
    algebra = FeatureAlgebra(context)
    return _symmetric_matrix(context.feature_length,
                             lambda u, v: algebra.expectation(algebra.s_terms(u), algebra.s_terms(v)))


def compute_r_sy(context: MomentContext) -> np.ndarray:
    """E{s y_n}; the target is the last entry of ytilde."""
    algebra = FeatureAlgebra(context)
    return np.array([algebra.expectation(algebra.s_terms(u), algebra.y_terms)
                     for u in range(context.feature_length)])


def compute_R_tt(context: MomentContext, m: int) -> np.ndarray:
    """E{t_m t_m^T} for input node m (0-based)."""
    if not 0 <= m < context.num_inputs:
        raise DimensionMismatchError(f"Input node {m} outside 0..{context.num_inputs - 1}.")
    algebra = FeatureAlgebra(context)
    return _symmetric_matrix(context.feature_length,
                             lambda u, v: algebra.expectation(algebra.t_terms(m, u), algebra.t_terms(m, v)))


def compute_fourth_order(context: MomentContext) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    F[u, l, m, v] = E{s_u s_l s_m s_v}, T_sssy[u, a, b] = E{s_u s_a s_b y_n}
    and T_ssyy[u, v] = E{s_u s_v y_n^2}. Each canonical (sorted) index tuple
    is evaluated once and mirrored to all its permutations.
    """
    algebra = FeatureAlgebra(context)
    k_s = context.feature_length
    s, y = algebra.s_terms, algebra.y_terms

    F = np.empty((k_s,) * 4)
    count = 0
    for key in itertools.combinations_with_replacement(range(k_s), 4):
        value = algebra.expectation(s(key[0]), s(key[1]), s(key[2]), s(key[3]))
        for perm in set(itertools.permutations(key)):
            F[perm] = value
        count += 1
    logger.debug("Evaluated %d canonical fourth-order entries for k_s=%d.", count, k_s)

    T_sssy = np.empty((k_s,) * 3)
    for key in itertools.combinations_with_replacement(range(k_s), 3):
        value = algebra.expectation(s(key[0]), s(key[1]), s(key[2]), y)
        for perm in set(itertools.permutations(key)):
            T_sssy[perm] = value

    T_ssyy = _symmetric_matrix(k_s, lambda u, v: algebra.expectation(s(u), s(v), y, y))
    return F, T_sssy, T_ssyy


@dataclass(eq=False)
class MomentSet:
    R_ss: np.ndarray
    r_sy: np.ndarray
    R_tt: np.ndarray
    F: Optional[np.ndarray] = None
    T_sssy: Optional[np.ndarray] = None
    T_ssyy: Optional[np.ndarray] = None

    @property
    def feature_length(self) -> int:
        return self.r_sy.size

    @property
    def num_inputs(self) -> int:
        return self.R_tt.shape[0]

    @property
    def has_fourth_order(self) -> bool:
        return self.F is not None

    def F1_matrix(self) -> np.ndarray:
        """
        F1[u + l k_s, m + v k_s] = F[u, l, m, v], the layout that matches
        column-stacking vec(). Equal to F.reshape by full symmetry.
        """
        if self.F is None:
            raise MomentComputationError("Fourth-order moments were not computed.")
        k_s = self.feature_length
        return np.transpose(self.F, (1, 0, 3, 2)).reshape(k_s * k_s, k_s * k_s)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"R_ss": self.R_ss, "r_sy": self.r_sy, "R_tt": self.R_tt}
        if self.has_fourth_order:
            arrays.update(F=self.F, T_sssy=self.T_sssy, T_ssyy=self.T_ssyy)
        with open(path, "wb") as handle:
            np.savez(handle, **arrays)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MomentSet":
        with np.load(path) as data:
            fourth = "F" in data.files
            return cls(
                R_ss=data["R_ss"], r_sy=data["r_sy"], R_tt=data["R_tt"],
                F=data["F"] if fourth else None,
                T_sssy=data["T_sssy"] if fourth else None,
                T_ssyy=data["T_ssyy"] if fourth else None,
            )


def compute_moment_set(context: MomentContext, fourth_order: bool = True) -> MomentSet:
    R_ss = compute_R_ss(context)
    r_sy = compute_r_sy(context)
    R_tt = np.stack([compute_R_tt(context, m) for m in range(context.num_inputs)])
    moments = MomentSet(R_ss, r_sy, R_tt)
    if fourth_order:
        moments.F, moments.T_sssy, moments.T_ssyy = compute_fourth_order(context)
    return moments


def sample_moment_set(kernel: GaussianKernel, dictionary: Dictionary, inputs: np.ndarray, target: np.ndarray,
                      fourth_order: bool = True, chunk_size: Optional[int] = None) -> MomentSet:
    """
    Sample averages of every table in a MomentSet, from row-stacked inputs
    (n, N) and the matching target values. Used when the joint law of
    [y; y_n] is not Gaussian, so the closed forms do not apply.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    target = np.asarray(target, dtype=float).ravel()
    n = inputs.shape[0]
    if target.size != n:
        raise DimensionMismatchError(f"{n} input rows but {target.size} target values.")
    if n == 0:
        raise DimensionMismatchError("No samples to estimate moments from.")
    k_s = dictionary.feature_length()
    N = dictionary.dimension
    if chunk_size is None:
        chunk_size = max(1000, SAMPLE_CHUNK_ENTRIES // (k_s * k_s if fourth_order else k_s * N))

    R_ss = np.zeros((k_s, k_s))
    r_sy = np.zeros(k_s)
    R_tt = np.zeros((N, k_s, k_s))
    if fourth_order:
        pair_pair = np.zeros((k_s * k_s, k_s * k_s))
        pair_single = np.zeros((k_s * k_s, k_s))
        pair_target = np.zeros(k_s * k_s)
    for start in range(0, n, chunk_size):
        S, T = feature_batch(kernel, dictionary, inputs[start:start + chunk_size])
        y = target[start:start + chunk_size]
        R_ss += S.T @ S
        r_sy += S.T @ y
        R_tt += np.einsum("nmu,nmv->muv", T, T)
        if fourth_order:
            # P[n, u k_s + v] = s_u s_v
            P = (S[:, :, None] * S[:, None, :]).reshape(S.shape[0], k_s * k_s)
            pair_pair += P.T @ P
            pair_single += P.T @ (S * y[:, None])
            pair_target += P.T @ (y * y)

    moments = MomentSet(_symmetrized(R_ss / n), r_sy / n, np.stack([_symmetrized(R / n) for R in R_tt]))
    if fourth_order:
        moments.F = (_symmetrized(pair_pair / n)).reshape(k_s, k_s, k_s, k_s)
        moments.T_sssy = (pair_single / n).reshape(k_s, k_s, k_s)
        moments.T_ssyy = _symmetrized((pair_target / n).reshape(k_s, k_s))
    return moments


def _symmetrized(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


class MomentCache:
    """
    On-disk cache of MomentSets keyed by a hash of (R_ytilde, atoms, sigma,
    fourth-order flag). Optimal coefficient vectors are stored next to them,
    keyed additionally by eta.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    @staticmethod
    def key(context: MomentContext, fourth_order: bool) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(context.input_covariance, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(context.atoms, dtype=np.float64).tobytes())
        digest.update(np.float64(context.bandwidth).tobytes())
        digest.update(b"4" if fourth_order else b"2")
        return digest.hexdigest()[:24]

    def moment_path(self, key: str) -> Path:
        return self.directory / f"moments_{key}.npz"

    def gamma_path(self, key: str, eta: float) -> Path:
        return self.directory / f"gamma_{key}_{float(eta).hex()}.npy"

    @staticmethod
    def sample_key(*parts: Union[str, float, int, np.ndarray]) -> str:
        """Key for sampled moments: every part that changes the samples or the features."""
        digest = hashlib.sha256(b"sampled")
        for part in parts:
            if isinstance(part, np.ndarray):
                digest.update(np.ascontiguousarray(part, dtype=np.float64).tobytes())
            else:
                digest.update(repr(part).encode())
        return digest.hexdigest()[:24]

    def load_or_build(self, key: str, build: Callable[[], MomentSet]) -> Tuple[MomentSet, bool]:
        """Returns the moment set stored under `key`, building and storing it on a miss."""
        path = self.moment_path(key)
        if path.exists():
            logger.info("Moment cache hit %s", path)
            return MomentSet.load(path), True
        moments = build()
        moments.save(path)
        logger.info("Moment set cached at %s", path)
        return moments, False

    def load_or_compute(self, context: MomentContext, fourth_order: bool = True) -> Tuple[MomentSet, bool]:
        """Returns the moment set and whether it came from the cache."""
        return self.load_or_build(self.key(context, fourth_order),
                                  lambda: compute_moment_set(context, fourth_order))

    def load_gamma(self, key: str, eta: float) -> Optional[np.ndarray]:
        path = self.gamma_path(key, eta)
        return np.load(path) if path.exists() else None

    def save_gamma(self, key: str, eta: float, gamma: np.ndarray) -> Path:
        path = self.gamma_path(key, eta)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, gamma)
        return path
