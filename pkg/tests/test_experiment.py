from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from src.topology_inference.artifacts import compare_curves, emit_outputs, load_curve, render_plots
from src.topology_inference.config import DictionarySpec, ExperimentConfig, load_experiment_config
from src.topology_inference.errors import StageError
from src.topology_inference.experiment import (
    EnsembleSpec,
    ExperimentRunner,
    aggregate,
    run_ensemble,
    simulate_realization,
)
from src.topology_inference.gaussian_moments import compute_moment_set
from src.topology_inference.stages import get_registered_stages
from src.topology_inference.theory import RADIUS_TOLERANCE, TheoryCurves, stability_bound

from tests.conftest import SMALL_ADJACENCY

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
PIPELINE_STAGES = {"model", "covariance", "dictionary", "moments", "gamma_star", "step_size", "ensemble", "theory"}


def small_config(**overrides) -> ExperimentConfig:
    values = dict(
        model="custom",
        adjacency=SMALL_ADJACENCY.tolist(),
        noise_std=0.5,
        node=1,
        step_size_fraction=0.1,
        runs=4,
        horizon=120,
        seed=5,
        n_jobs=1,
        dictionary=DictionarySpec(size=2, seed=3),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


class TestCompareCurves:
    def test_identical_curves(self):
        curve = np.linspace(1.0, 0.1, 50)
        assert compare_curves(curve, curve).max_gap_db == 0.0

    def test_factor_two_is_three_db(self):
        curve = np.linspace(1.0, 0.1, 50)
        report = compare_curves(2 * curve, curve)
        assert report.max_gap_db == pytest.approx(10 * np.log10(2))
        assert report.burn_in == 5

    def test_nonpositive_points_are_excluded(self):
        emp = np.array([1.0, 1.0, 0.0, -1.0, 1.0])
        report = compare_curves(emp, np.ones(5), burn_in=0)
        assert report.excluded == 2
        assert report.max_gap_db == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compare_curves(np.ones(3), np.ones(4))


def test_runner_produces_consistent_artifacts(recording_handler):
    artifacts = ExperimentRunner(recording_handler).run_experiment(small_config())
    k_s = 6
    assert artifacts.gamma_emp.shape == (120, k_s)
    assert artifacts.gamma_theo.shape == (120, k_s)
    assert artifacts.msd_emp.shape == artifacts.msd_theo.shape == (120,)
    assert artifacts.msd_steady is not None and artifacts.msd_steady > 0
    assert artifacts.true_row.tolist() == [1, 1]
    assert artifacts.diverged_runs == 0
    np.testing.assert_array_equal(artifacts.gamma_emp[0], 0.0)
    assert recording_handler.tables[-1][0] == "Experiment summary"
    assert set(recording_handler.stage_names()) == PIPELINE_STAGES
    assert all(t.seconds is not None and not t.failed for t in recording_handler.stages)


def test_regularized_run_has_no_steady_state_value(recording_handler):
    artifacts = ExperimentRunner(recording_handler).run_experiment(small_config(regularization=1e-3))
    assert artifacts.msd_steady is None
    assert np.all(np.isfinite(artifacts.msd_theo))


def test_second_run_uses_the_moment_cache(recording_handler):
    runner = ExperimentRunner(recording_handler)
    runner.prepare(small_config(), solve=False)
    runner.prepare(small_config(), solve=False)
    assert any("loaded from cache" in m for m in recording_handler.by_style('dim'))


def test_same_seed_gives_byte_identical_files(tmp_path, recording_handler):
    config = small_config()
    for name in ("a", "b"):
        artifacts = ExperimentRunner(recording_handler).run_experiment(config)
        emit_outputs(artifacts, tmp_path / name)
    for filename in ("mean_curves.csv", "msd.csv", "topology.csv", "theory.csv"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()


def test_parallel_ensemble_matches_serial(small_model, small_kernel, small_dictionary):
    spec = EnsembleSpec(small_model, 0, small_kernel, small_dictionary, 0.05, 0.0, 0.9, 50)
    serial = run_ensemble(spec, 9, 4, n_jobs=1)
    parallel = run_ensemble(spec, 9, 4, n_jobs=2)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.trajectory, b.trajectory)


def test_divergent_run_is_flagged(small_model, small_kernel, small_dictionary):
    spec = EnsembleSpec(small_model, 0, small_kernel, small_dictionary, 50.0, 0.0, 0.9, 200,
                        divergence_threshold=1e6)
    result = simulate_realization(spec, 1)
    assert result.diverged
    assert np.all(np.isnan(result.trajectory[result.diverged_at:]))
    assert np.all(np.isnan(result.final_delta))


@pytest.mark.slow
def test_step_size_bound_separates_convergence_from_divergence(recording_handler):
    runner = ExperimentRunner(recording_handler)
    stable = runner.run_experiment(small_config(step_size_fraction=0.1, runs=20, horizon=2000))
    assert stable.diverged_runs == 0
    assert stable.msd_emp[-1] < stable.msd_emp[0]

    unstable = runner.run_experiment(small_config(step_size_fraction=2.0, runs=20, horizon=10_000))
    assert unstable.diverged_runs >= 19


def test_emitted_files(tmp_path, recording_handler):
    artifacts = ExperimentRunner(recording_handler).run_experiment(small_config(horizon=40))
    paths = emit_outputs(artifacts, tmp_path)
    assert {p.name for p in paths} == {"mean_curves.csv", "msd.csv", "topology.csv", "theory.csv",
                                       "plot_curves.py"}

    header = (tmp_path / "mean_curves.csv").read_text().splitlines()[0].split(",")
    assert header == (["iter"] + [f"gamma_emp_{j}" for j in range(1, 7)]
                      + [f"gamma_theo_{j}" for j in range(1, 7)])
    assert (tmp_path / "msd.csv").read_text().splitlines()[0] == "iter,msd_emp,msd_theo,msd_ss"
    assert (tmp_path / "topology.csv").read_text().splitlines()[0] == "m,delta_m,a_hat"

    np.testing.assert_array_equal(load_curve(tmp_path / "msd.csv", "msd_emp"), artifacts.msd_emp)
    means = pd.read_csv(tmp_path / "mean_curves.csv")
    np.testing.assert_array_equal(means["gamma_theo_3"].to_numpy(), artifacts.gamma_theo[:, 2])
    topology = pd.read_csv(tmp_path / "topology.csv")
    assert topology["m"].tolist() == [1, 2]
    with pytest.raises(KeyError):
        load_curve(tmp_path / "msd.csv", "missing")

    figures = render_plots(tmp_path)
    assert [p.name for p in figures] == ["msd.png", "mean_coefficients.png"]
    assert all(p.stat().st_size > 0 for p in figures)


def test_stage_failures_carry_the_stage_label(recording_handler):
    config = small_config(adjacency=[[0, 1], [1, 0]])
    with pytest.raises(StageError) as info:
        ExperimentRunner(recording_handler).run_experiment(config)
    assert info.value.stage == "model"
    assert recording_handler.stage_names() == ["model"]
    assert recording_handler.stages[0].failed


def test_pipeline_stages_are_registered():
    names = {s["name"] for s in get_registered_stages()}
    assert PIPELINE_STAGES | {"sampled_moments"} <= names


def _stable_and_diverged_runs(small_model, small_kernel, small_dictionary, small_context, horizon=200):
    mu = 0.1 * stability_bound(compute_moment_set(small_context, fourth_order=False).R_ss)
    spec = EnsembleSpec(small_model, 0, small_kernel, small_dictionary, mu, 0.0, 0.9, horizon)
    stable = [simulate_realization(spec, seed) for seed in (11, 12, 13)]
    diverged = simulate_realization(replace(spec, step_size=50.0), 1)
    return stable, diverged


def _placeholder_inputs(k_s: int, horizon: int):
    gamma_star = np.zeros(k_s)
    prepared = SimpleNamespace(gamma_star=gamma_star, true_row=np.array([1, 1]), step_size=0.05,
                               mean_square_radius=None)
    curves = TheoryCurves(np.zeros((horizon, k_s)), np.zeros(horizon), gamma_star)
    return prepared, curves


def test_diverged_runs_are_left_out_of_the_ensemble_curves(small_model, small_kernel, small_dictionary,
                                                           small_context):
    stable, diverged = _stable_and_diverged_runs(small_model, small_kernel, small_dictionary, small_context)
    assert not any(r.diverged for r in stable) and diverged.diverged
    prepared, curves = _placeholder_inputs(6, 200)

    artifacts = aggregate(stable + [diverged], curves, None, prepared)

    trajectories = np.stack([r.trajectory for r in stable])
    np.testing.assert_allclose(artifacts.msd_emp, np.sum(trajectories ** 2, axis=2).mean(axis=0))
    np.testing.assert_allclose(artifacts.gamma_emp, trajectories.mean(axis=0))
    np.testing.assert_allclose(artifacts.gamma_emp_stderr, trajectories.std(axis=0, ddof=1) / np.sqrt(3))
    assert np.all(np.isfinite(artifacts.msd_emp))
    assert artifacts.runs == 4 and artifacts.diverged_runs == 1


def test_all_diverged_runs_give_undefined_curves(small_model, small_kernel, small_dictionary, small_context):
    _, diverged = _stable_and_diverged_runs(small_model, small_kernel, small_dictionary, small_context)
    prepared, curves = _placeholder_inputs(6, 200)
    artifacts = aggregate([diverged, diverged], curves, None, prepared)
    assert np.all(np.isnan(artifacts.msd_emp)) and np.all(np.isnan(artifacts.gamma_emp))
    assert artifacts.diverged_runs == 2 and artifacts.topology_hits == 0


def test_runner_warns_when_every_run_diverges(recording_handler):
    config = small_config(step_size=50.0, step_size_fraction=None, runs=2, horizon=200)
    artifacts = ExperimentRunner(recording_handler).run_experiment(config)
    assert artifacts.diverged_runs == 2
    assert np.all(np.isnan(artifacts.msd_emp))
    assert any("All 2 runs diverged" in m for m in recording_handler.by_style('warning'))


def test_step_size_stage_reports_the_mean_square_radius(recording_handler):
    runner = ExperimentRunner(recording_handler)
    stable = runner.prepare(small_config(step_size_fraction=0.1))
    assert stable.mean_square_radius < 1.0

    # 0.9 of the mean-stability bound already makes F0 expansive on this model.
    unstable = runner.prepare(small_config(step_size_fraction=0.9))
    assert unstable.mean_square_radius > 1.0
    assert any("Mean-square recursion is unstable" in m for m in recording_handler.by_style('warning'))

    guarded = runner.prepare(small_config(step_size_fraction=0.9, step_size_rule="mean_square"))
    assert guarded.mean_square_radius <= 1.0 + RADIUS_TOLERANCE
    assert guarded.step_size < unstable.step_size


def test_sampled_moments_agree_with_the_closed_form_on_a_gaussian_model(recording_handler):
    runner = ExperimentRunner(recording_handler)
    exact = runner.prepare(small_config(), solve=False).moments
    sampled = runner.prepare(small_config(moment_source="sampled", moment_samples=100_000), solve=False)
    assert "sampled_moments" in recording_handler.stage_names()
    assert sampled.context is None
    for name in ("R_ss", "r_sy", "R_tt", "F", "T_ssyy"):
        expected = getattr(exact, name)
        np.testing.assert_allclose(getattr(sampled.moments, name), expected,
                                   atol=0.05 * np.abs(expected).max(), err_msg=name)

    runner.prepare(small_config(moment_source="sampled", moment_samples=100_000), solve=False)
    assert any("loaded from cache" in m for m in recording_handler.by_style('dim'))


@pytest.mark.slow
@pytest.mark.parametrize("eta", [0.01, 0.05])
def test_regularized_model_tracks_the_ensemble(eta, recording_handler):
    config = small_config(regularization=eta, step_size_fraction=0.2, runs=300, horizon=600)
    artifacts = ExperimentRunner(recording_handler).run_experiment(config)
    assert artifacts.diverged_runs == 0
    assert np.all(np.isfinite(artifacts.msd_theo))
    assert compare_curves(artifacts.msd_emp, artifacts.msd_theo).max_gap_db <= 0.5


@pytest.fixture(scope="module")
def reference_cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("reference_moments"))


def reference_config(**overrides) -> ExperimentConfig:
    return replace(load_experiment_config(CONFIG_DIR / "linear_eta0.toml"), n_jobs=1, **overrides)


@pytest.mark.slow
def test_reference_model_matches_its_convergence_model(reference_cache, recording_handler):
    config = reference_config(runs=50, horizon=3000)
    artifacts = ExperimentRunner(recording_handler, cache_dir=reference_cache).run_experiment(config)
    assert artifacts.diverged_runs == 0
    assert compare_curves(artifacts.msd_emp, artifacts.msd_theo).max_gap_db <= 0.5

    burn_in = config.horizon // 10
    gap = np.abs(artifacts.gamma_emp - artifacts.gamma_theo)[burn_in:]
    assert np.all(gap <= 8 * artifacts.gamma_emp_stderr[burn_in:] + 1e-9)
    # R_ss has near-zero eigenvalues, so the tail is still far from steady state.
    assert artifacts.msd_steady is not None and np.isfinite(artifacts.msd_steady)


@pytest.mark.slow
def test_reference_model_converges_below_the_bound_and_diverges_above(reference_cache, recording_handler):
    runner = ExperimentRunner(recording_handler, cache_dir=reference_cache)
    below = runner.run_experiment(reference_config(step_size_fraction=0.9, runs=20, horizon=10_000))
    assert below.diverged_runs == 0
    assert below.mean_square_radius <= 1.0 + RADIUS_TOLERANCE
    assert np.all(np.isfinite(below.msd_emp)) and below.msd_emp.max() < 1e3

    above = runner.run_experiment(reference_config(step_size_fraction=2.0, runs=20, horizon=10_000))
    assert above.diverged_runs >= 19


@pytest.mark.slow
def test_nonlinear_model_tracks_the_ensemble_with_sampled_moments(recording_handler):
    config = replace(load_experiment_config(CONFIG_DIR / "nonlinear_eta0.toml"),
                     runs=30, horizon=3000, moment_samples=100_000, n_jobs=1)
    artifacts = ExperimentRunner(recording_handler).run_experiment(config)
    assert artifacts.diverged_runs == 0
    assert artifacts.mean_square_radius < 1.0
    assert np.all(np.isfinite(artifacts.msd_theo))
    assert compare_curves(artifacts.msd_emp, artifacts.msd_theo).max_gap_db <= 3.0


@pytest.mark.slow
def test_regularized_nonlinear_ensemble_stays_bounded(recording_handler):
    config = replace(load_experiment_config(CONFIG_DIR / "nonlinear_eta03.toml"),
                     runs=30, horizon=3000, moment_samples=100_000, n_jobs=1)
    artifacts = ExperimentRunner(recording_handler).run_experiment(config)
    assert artifacts.diverged_runs == 0
    assert np.all(np.isfinite(artifacts.msd_emp))
