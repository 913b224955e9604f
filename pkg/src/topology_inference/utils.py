import os
from typing import List

import numpy as np

from src.topology_inference.config import Config


def validate_config_paths(file_paths: List[str]) -> List[str]:
    """
    Returns a list of problems with the given config paths (empty when all are valid).
    """
    problems = []
    supported_extensions = tuple(Config.SUPPORTED_CONFIG_EXTENSIONS)
    for file_path in file_paths:
        if not os.path.exists(file_path):
            problems.append(f"File not found at '{file_path}'")
            continue
        file_ext = os.path.splitext(file_path)[1].lower()
        if file_ext not in supported_extensions:
            problems.append(f"'{file_path}' is not a supported file type. "
                            f"Supported types are: {', '.join(Config.SUPPORTED_CONFIG_EXTENSIONS)}.")
    return problems


def derive_run_seed(master_seed: int, run_index: int) -> int:
    """
    Per-run seed from (master seed, run index). The run index is the spawn key
    of a SeedSequence rooted at the master seed, so seeds do not depend on how
    runs are scheduled.
    """
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(run_index,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def derive_stream_seed(master_seed: int, purpose: int) -> int:
    """Seed for auxiliary streams (covariance estimation, pilot data); disjoint from run seeds."""
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(2 ** 31, purpose))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def to_db(values: np.ndarray) -> np.ndarray:
    """10 log10(values); nonpositive entries map to nan."""
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, np.nan)
    positive = values > 0
    out[positive] = 10.0 * np.log10(values[positive])
    return out
