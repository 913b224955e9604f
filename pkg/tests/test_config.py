from pathlib import Path

import numpy as np
import pytest

from src.topology_inference.config import (
    DictionarySpec,
    ExperimentConfig,
    load_experiment_config,
    parse_experiment_config,
)
from src.topology_inference.errors import ConfigError
from src.topology_inference.utils import derive_run_seed, derive_stream_seed, to_db, validate_config_paths

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

EXPERIMENT_TOML = """
model = "linear"
node = 1
step_size = 0.05
regularization = 1e-4
runs = 10
horizon = 200

[dictionary]
size = 4
seed = 11
"""


def test_load_experiment_file(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(EXPERIMENT_TOML)
    config = load_experiment_config(path)
    assert config.step_size == 0.05 and config.step_size_fraction is None
    assert config.regularization == pytest.approx(1e-4)
    assert config.dictionary == DictionarySpec(size=4, seed=11)
    assert config.node_index == 0


def test_shipped_configs_parse():
    for name in ("linear_eta0", "linear_eta1e-4", "nonlinear_eta0", "nonlinear_eta03"):
        config = load_experiment_config(CONFIG_DIR / f"{name}.toml")
        assert config.node == 1 and config.runs == 100


@pytest.mark.parametrize("data", [
    {"step_size": 0.1, "unknown": 1},
    {"step_size": 0.1, "dictionary": {"bogus": 2}},
    {"step_size": 0.1, "step_size_fraction": 0.5},
    {},
    {"step_size": -0.1},
    {"step_size": 0.1, "runs": 0},
    {"step_size": 0.1, "model": "quadratic"},
    {"step_size": 0.1, "model": "custom"},
    {"step_size": 0.1, "forgetting": 1.0},
    {"step_size": 0.1, "node": 0},
    {"step_size": 0.1, "dictionary": {"mode": "random"}},
    {"step_size": 0.1, "moment_source": "bootstrap"},
    {"step_size_fraction": 0.5, "moment_samples": 0},
    {"step_size_fraction": 0.5, "step_size_rule": "median"},
    {"step_size": 0.1, "step_size_rule": "mean_square"},
])
def test_invalid_configs_are_rejected(data):
    with pytest.raises(ConfigError):
        parse_experiment_config(data)


def test_unsupported_or_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "experiment.yaml")
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("model = ")
    with pytest.raises(ConfigError):
        load_experiment_config(broken)
    assert len(validate_config_paths([str(tmp_path / "missing.toml"), str(broken)])) == 1


def test_overrides_keep_other_fields():
    config = ExperimentConfig(step_size=0.1)
    updated = config.with_overrides(runs=3, seed=9, output_dir="out")
    assert (updated.runs, updated.seed, updated.output_dir) == (3, 9, "out")
    assert updated.step_size == 0.1
    assert config.with_overrides() == config


def test_run_seeds_are_stable_and_distinct():
    seeds = [derive_run_seed(42, r) for r in range(100)]
    assert seeds == [derive_run_seed(42, r) for r in range(100)]
    assert len(set(seeds)) == 100
    assert derive_run_seed(43, 0) != seeds[0]
    assert derive_stream_seed(42, 0) not in seeds


def test_to_db():
    np.testing.assert_allclose(to_db([1.0, 10.0, 0.0, -1.0]), [0.0, 10.0, np.nan, np.nan])


def test_nonlinear_configs_use_sampled_moments_and_mean_square_rule():
    for name in ("nonlinear_eta0", "nonlinear_eta03"):
        config = load_experiment_config(CONFIG_DIR / f"{name}.toml")
        assert config.moment_source == "sampled"
        assert config.step_size_rule == "mean_square"
    assert load_experiment_config(CONFIG_DIR / "linear_eta0.toml").moment_source == "gaussian"
