import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from src.topology_inference.errors import ConfigError

load_dotenv()  # Load environment variables from .env file


class Config:
    """
    Process-wide defaults, read from environment variables (or a .env file).
    """
    CACHE_DIR: str = os.getenv("TOPOLOGY_CACHE_DIR", ".moment_cache")
    OUTPUT_DIR: str = os.getenv("TOPOLOGY_OUTPUT_DIR", "results")
    N_JOBS: int = int(os.getenv("TOPOLOGY_N_JOBS", "1"))
    LOG_LEVEL: str = os.getenv("TOPOLOGY_LOG_LEVEL", "WARNING")

    PLOTS_DIR: str = "plots"
    CSV_FLOAT_FORMAT: str = "%.17g"
    SUPPORTED_CONFIG_EXTENSIONS: list = [".toml"]

    # Number of samples used to estimate R_ytilde when no closed form exists.
    DEFAULT_COVARIANCE_SAMPLES: int = 1_000_000
    # Number of samples averaged when the feature moments are estimated directly.
    DEFAULT_MOMENT_SAMPLES: int = 200_000


MODELS = ("linear", "nonlinear", "custom")
MOMENT_SOURCES = ("gaussian", "sampled")
STEP_SIZE_RULES = ("mean", "mean_square")


@dataclass(frozen=True)
class DictionarySpec:
    mode: str = "grid"
    size: int = 6
    low: float = -1.0
    high: float = 1.0
    seed: int = 7
    coherence: float = 0.5
    pilot_samples: int = 10_000


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment. `node` is 1-based. Exactly one of step_size and
    step_size_fraction is set. The fraction multiplies 2 / lambda_max(R_ss)
    under the "mean" rule, and the largest mean-square stable step size
    under the "mean_square" rule. `moment_source` selects closed-form
    Gaussian moments or sample averages of the features.
    """
    model: str = "linear"
    adjacency: Optional[List[List[float]]] = None
    noise_std: float = 0.05
    node: int = 1
    kernel_bandwidth: float = 1.0
    step_size: Optional[float] = None
    step_size_fraction: Optional[float] = None
    regularization: float = 0.0
    forgetting: float = 0.99
    runs: int = 100
    horizon: int = 5000
    seed: int = 42
    use_exact_rtt: bool = True
    covariance_samples: int = Config.DEFAULT_COVARIANCE_SAMPLES
    moment_source: str = "gaussian"
    moment_samples: int = Config.DEFAULT_MOMENT_SAMPLES
    step_size_rule: str = "mean"
    divergence_threshold: float = 1e6
    n_jobs: int = Config.N_JOBS
    output_dir: str = Config.OUTPUT_DIR
    dictionary: DictionarySpec = field(default_factory=DictionarySpec)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"'model' must be one of {', '.join(MODELS)}, got '{self.model}'.")
        if self.model == "custom" and self.adjacency is None:
            raise ConfigError("'adjacency' is required for the custom model.")
        if (self.step_size is None) == (self.step_size_fraction is None):
            raise ConfigError("Set exactly one of 'step_size' and 'step_size_fraction'.")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"'step_size' must be positive, got {self.step_size}.")
        if self.step_size_fraction is not None and not self.step_size_fraction > 0:
            raise ConfigError(f"'step_size_fraction' must be positive, got {self.step_size_fraction}.")
        if self.regularization < 0:
            raise ConfigError(f"'regularization' must be nonnegative, got {self.regularization}.")
        if not 0.0 <= self.forgetting < 1.0:
            raise ConfigError(f"'forgetting' must lie in [0, 1), got {self.forgetting}.")
        if self.runs < 1:
            raise ConfigError(f"'runs' must be >= 1, got {self.runs}.")
        if self.horizon < 1:
            raise ConfigError(f"'horizon' must be >= 1, got {self.horizon}.")
        if not self.kernel_bandwidth > 0:
            raise ConfigError(f"'kernel_bandwidth' must be positive, got {self.kernel_bandwidth}.")
        if not self.noise_std > 0:
            raise ConfigError(f"'noise_std' must be positive, got {self.noise_std}.")
        if self.node < 1:
            raise ConfigError(f"'node' is 1-based and must be >= 1, got {self.node}.")
        if self.moment_source not in MOMENT_SOURCES:
            raise ConfigError(f"'moment_source' must be one of {', '.join(MOMENT_SOURCES)}, "
                              f"got '{self.moment_source}'.")
        if self.moment_samples < 1:
            raise ConfigError(f"'moment_samples' must be >= 1, got {self.moment_samples}.")
        if self.step_size_rule not in STEP_SIZE_RULES:
            raise ConfigError(f"'step_size_rule' must be one of {', '.join(STEP_SIZE_RULES)}, "
                              f"got '{self.step_size_rule}'.")
        if self.step_size is not None and self.step_size_rule != "mean":
            raise ConfigError("'step_size_rule' only applies together with 'step_size_fraction'.")
        if self.dictionary.mode not in ("grid", "coherence"):
            raise ConfigError(f"'dictionary.mode' must be 'grid' or 'coherence', got '{self.dictionary.mode}'.")
        if self.dictionary.size < 1:
            raise ConfigError(f"'dictionary.size' must be >= 1, got {self.dictionary.size}.")

    @property
    def node_index(self) -> int:
        return self.node - 1

    def with_overrides(self, runs: Optional[int] = None, seed: Optional[int] = None,
                       output_dir: Optional[str] = None, n_jobs: Optional[int] = None) -> "ExperimentConfig":
        changes: Dict[str, Any] = {}
        if runs is not None:
            changes["runs"] = runs
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = output_dir
        if n_jobs is not None:
            changes["n_jobs"] = n_jobs
        return replace(self, **changes)


_TOP_LEVEL_KEYS = {f for f in ExperimentConfig.__dataclass_fields__ if f != "dictionary"}
_DICTIONARY_KEYS = set(DictionarySpec.__dataclass_fields__)


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    unknown = set(data) - _TOP_LEVEL_KEYS - {"dictionary"}
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}.")
    dictionary_data = data.get("dictionary", {})
    if not isinstance(dictionary_data, dict):
        raise ConfigError("'dictionary' must be a table.")
    unknown = set(dictionary_data) - _DICTIONARY_KEYS
    if unknown:
        raise ConfigError(f"Unknown dictionary keys: {', '.join(sorted(unknown))}.")
    try:
        dictionary = DictionarySpec(**dictionary_data)
        values = {k: v for k, v in data.items() if k != "dictionary"}
        return ExperimentConfig(dictionary=dictionary, **values)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Reads a TOML experiment file. See README.md for the schema.
    """
    path = Path(path)
    if path.suffix.lower() not in Config.SUPPORTED_CONFIG_EXTENSIONS:
        raise ConfigError(f"'{path}' is not a supported config type. Supported: "
                          f"{', '.join(Config.SUPPORTED_CONFIG_EXTENSIONS)}.")
    if not path.exists():
        raise ConfigError(f"Config file not found at '{path}'.")
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Could not parse '{path}': {e}") from e
    return parse_experiment_config(data)
