from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.topology_inference.artifacts import RunArtifacts, compare_curves
from src.topology_inference.batch_solver import BatchProblem, solve_gamma_star
from src.topology_inference.config import Config, ExperimentConfig
from src.topology_inference.errors import DivergenceError, InstabilityError, ModelConstructionError
from src.topology_inference.gaussian_moments import MomentCache, MomentContext, MomentSet, sample_moment_set
from src.topology_inference.graph_model import (
    REFERENCE_LINEAR_ADJACENCY,
    AdjacencyMatrix,
    NonlinearSignalModel,
    SignalModel,
    build_linear_model,
    estimate_covariance,
    reorder_for_node,
    sample_signals,
    split_node,
)
from src.topology_inference.kernel import (
    Dictionary,
    GaussianKernel,
    build_coherence_dictionary,
    dictionary_grid,
    feature_batch,
)
from src.topology_inference.online_inference import (
    deltas,
    init_state,
    largest_gap_threshold,
    step,
    update_covariance,
)
from src.topology_inference.output.abstract_output_handler import AbstractOutputHandler
from src.topology_inference.stages import stage
from src.topology_inference.theory import (
    RADIUS_TOLERANCE,
    TheoryCurves,
    mean_square_radius,
    mean_square_step_limit,
    run_theory,
    stability_bound,
    steady_state_msd,
)
from src.topology_inference.utils import derive_run_seed, derive_stream_seed

COVARIANCE_STREAM = 0
PILOT_STREAM = 1
MOMENT_STREAM = 2


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """Everything one Monte-Carlo realization needs; `node` is 0-based."""
    model: SignalModel
    node: int
    kernel: GaussianKernel
    dictionary: Dictionary
    step_size: float
    reg_weight: float
    forgetting: float
    horizon: int
    exact_rtt: Optional[np.ndarray] = None
    divergence_threshold: float = 1e6


@dataclass(frozen=True, eq=False)
class RealizationResult:
    trajectory: np.ndarray          # (horizon, k_s); nan after divergence
    final_delta: np.ndarray         # (N,)
    diverged_at: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def simulate_realization(spec: EnsembleSpec, seed: int) -> RealizationResult:
    samples = sample_signals(spec.model, seed, spec.horizon)
    inputs, target = split_node(samples, spec.node)
    S, T = feature_batch(spec.kernel, spec.dictionary, inputs)

    N = inputs.shape[1]
    state = init_state(N, spec.dictionary.size, spec.step_size, spec.reg_weight, spec.forgetting,
                       exact_rtt=spec.exact_rtt)
    trajectory = np.full((spec.horizon, S.shape[1]), np.nan)
    for i in range(spec.horizon):
        if np.linalg.norm(state.gamma_hat) > spec.divergence_threshold:
            return RealizationResult(trajectory, np.full(N, np.nan), diverged_at=i)
        trajectory[i] = state.gamma_hat
        state = update_covariance(state, T[i])
        try:
            state = step(state, S[i], target[i])
        except DivergenceError as e:
            trajectory[i] = np.nan
            return RealizationResult(trajectory, np.full(N, np.nan), diverged_at=e.iteration)
    return RealizationResult(trajectory, deltas(state))


def run_ensemble(spec: EnsembleSpec, master_seed: int, runs: int, n_jobs: int = 1) -> List[RealizationResult]:
    """Results are ordered by run index whatever the number of workers."""
    seeds = [derive_run_seed(master_seed, r) for r in range(runs)]
    if n_jobs == 1:
        return [simulate_realization(spec, seed) for seed in seeds]
    return Parallel(n_jobs=n_jobs)(delayed(simulate_realization)(spec, seed) for seed in seeds)


@dataclass(eq=False)
class PreparedExperiment:
    config: ExperimentConfig
    model: SignalModel
    true_row: np.ndarray
    kernel: GaussianKernel
    dictionary: Dictionary
    context: Optional[MomentContext]
    moments: MomentSet
    cache_key: str
    gamma_star: Optional[np.ndarray] = None
    step_size: Optional[float] = None
    mean_square_radius: Optional[float] = None


class ExperimentRunner:
    """
    Drives an experiment stage by stage and reports progress through an output handler.
    """
    def __init__(self, output_handler: AbstractOutputHandler, cache_dir: str = None):
        self.output_handler = output_handler
        self.cache = MomentCache(cache_dir or Config.CACHE_DIR)

    @stage("model", "Build the graph signal model")
    def build_model(self, config: ExperimentConfig) -> Tuple[SignalModel, np.ndarray]:
        if config.model == "nonlinear":
            model = NonlinearSignalModel()
            if config.adjacency is not None:
                model = NonlinearSignalModel(adjacency=AdjacencyMatrix(np.array(config.adjacency, dtype=float)))
            adjacency = model.adjacency
        else:
            if config.model == "linear":
                entries = REFERENCE_LINEAR_ADJACENCY if config.adjacency is None else config.adjacency
                adjacency = AdjacencyMatrix(np.array(entries, dtype=float))
            else:
                adjacency = AdjacencyMatrix(np.array(config.adjacency, dtype=float), binary=False)
            model = build_linear_model(adjacency, config.noise_std)
        if config.node_index >= adjacency.size:
            raise ModelConstructionError(f"Node {config.node} outside a graph of {adjacency.size} nodes.")
        self.output_handler.print_message(
            f"Model '{config.model}' with {adjacency.size} nodes, target node {config.node}.", style='info')
        return model, adjacency.parents_row(config.node_index)

    @stage("covariance", "Input covariance of [inputs; y_n]")
    def input_covariance(self, config: ExperimentConfig, model: SignalModel) -> np.ndarray:
        if isinstance(model, NonlinearSignalModel):
            self.output_handler.print_message(
                f"Estimating the input covariance from {config.covariance_samples} samples.", style='dim')
            samples = sample_signals(model, derive_stream_seed(config.seed, COVARIANCE_STREAM),
                                     config.covariance_samples)
            covariance = estimate_covariance(samples)
        else:
            covariance = model.input_covariance
        return reorder_for_node(covariance, config.node_index)

    @stage("dictionary", "Build and freeze the dictionary")
    def build_dictionary(self, config: ExperimentConfig, model: SignalModel, kernel: GaussianKernel) -> Dictionary:
        spec = config.dictionary
        num_inputs = model.num_nodes - 1
        if spec.mode == "coherence":
            pilot = sample_signals(model, derive_stream_seed(config.seed, PILOT_STREAM), spec.pilot_samples)
            inputs, _ = split_node(pilot, config.node_index)
            dictionary = build_coherence_dictionary(kernel, inputs, spec.coherence, spec.size)
        else:
            dictionary = dictionary_grid(num_inputs, spec.size, (spec.low, spec.high), spec.seed)
        self.output_handler.print_message(
            f"Dictionary: {dictionary.size} atoms ({spec.mode}), k_s = {dictionary.feature_length()}.", style='dim')
        return dictionary

    @stage("moments", "Closed-form feature moments")
    def compute_moments(self, covariance: np.ndarray, kernel: GaussianKernel, dictionary: Dictionary,
                        fourth_order: bool = True) -> Tuple[MomentContext, MomentSet, str]:
        context = MomentContext.from_dictionary(covariance, kernel, dictionary)
        key = self.cache.key(context, fourth_order)
        moments, cached = self.cache.load_or_compute(context, fourth_order)
        self.output_handler.print_message(
            f"Moments {'loaded from cache' if cached else 'computed'} (key {key}).", style='dim')
        return context, moments, key

    @stage("sampled_moments", "Feature moments averaged over samples")
    def sample_moments(self, config: ExperimentConfig, model: SignalModel, kernel: GaussianKernel,
                       dictionary: Dictionary, fourth_order: bool = True) -> Tuple[MomentSet, str]:
        seed = derive_stream_seed(config.seed, MOMENT_STREAM)
        key = MomentCache.sample_key(config.model, config.adjacency, config.noise_std, config.node, seed,
                                     config.moment_samples, kernel.bandwidth, dictionary.elements, fourth_order)

        def build() -> MomentSet:
            samples = sample_signals(model, seed, config.moment_samples)
            inputs, target = split_node(samples, config.node_index)
            return sample_moment_set(kernel, dictionary, inputs, target, fourth_order)

        moments, cached = self.cache.load_or_build(key, build)
        self.output_handler.print_message(
            f"Moments {'loaded from cache' if cached else f'averaged over {config.moment_samples} samples'} "
            f"(key {key}).", style='dim')
        return moments, key

    @stage("gamma_star", "Optimal coefficients of the batch problem")
    def solve_gamma(self, moments: MomentSet, eta: float, cache_key: str) -> np.ndarray:
        gamma_star = self.cache.load_gamma(cache_key, eta)
        if gamma_star is not None:
            return gamma_star
        problem = BatchProblem.from_moments(moments.R_ss, moments.r_sy, moments.R_tt, eta)
        gamma_star, report = solve_gamma_star(problem)
        if not report.converged:
            self.output_handler.show_warning(
                f"Batch solver stopped after {report.iterations} iterations with residual "
                f"{report.residual:.3e} (target {report.tolerance:.3e}).")
        self.cache.save_gamma(cache_key, eta, gamma_star)
        return gamma_star

    @stage("step_size", "Step size and mean-square stability")
    def choose_step_size(self, config: ExperimentConfig, moments: MomentSet) -> Tuple[float, Optional[float]]:
        """Returns mu and the spectral radius of F0 at mu (None without fourth-order moments)."""
        bound = stability_bound(moments.R_ss)
        if config.step_size is not None:
            mu = config.step_size
        elif config.step_size_rule == "mean_square":
            limit = mean_square_step_limit(moments, bound)
            self.output_handler.print_message(
                f"Mean-square step limit {limit:.4g} (mean bound {bound:.4g}).", style='dim')
            mu = config.step_size_fraction * limit
        else:
            mu = config.step_size_fraction * bound
        if mu >= bound:
            self.output_handler.show_warning(f"Step size {mu:.4g} is outside the mean-stability bound {bound:.4g}.")
        if not moments.has_fourth_order:
            return mu, None
        radius = mean_square_radius(moments, mu)
        self.output_handler.print_message(f"Spectral radius of F0 at mu = {mu:.4g}: {radius:.6f}.", style='dim')
        if radius > 1.0 + RADIUS_TOLERANCE:
            self.output_handler.show_warning(
                f"Mean-square recursion is unstable at mu = {mu:.4g} (spectral radius {radius:.4f}).")
        return mu, radius

    @stage("ensemble", "Monte-Carlo runs of the online estimator")
    def simulate(self, spec: EnsembleSpec, config: ExperimentConfig) -> List[RealizationResult]:
        return run_ensemble(spec, config.seed, config.runs, config.n_jobs)

    @stage("theory", "Mean and mean-square recursions")
    def predict(self, prepared: PreparedExperiment) -> Tuple[TheoryCurves, Optional[float]]:
        config = prepared.config
        try:
            curves = run_theory(prepared.moments, prepared.gamma_star, prepared.step_size,
                                config.regularization, config.horizon)
        except DivergenceError as e:
            self.output_handler.show_warning(f"Model curves diverge: {e}")
            k_s = prepared.gamma_star.size
            nan_curves = TheoryCurves(np.full((config.horizon, k_s), np.nan), np.full(config.horizon, np.nan),
                                      prepared.gamma_star)
            return nan_curves, None
        steady = None
        if config.regularization == 0:
            try:
                steady = steady_state_msd(prepared.moments, prepared.gamma_star, prepared.step_size)
            except InstabilityError as e:
                self.output_handler.show_warning(f"No steady state: {e}")
        return curves, steady

    def prepare(self, config: ExperimentConfig, fourth_order: bool = True, solve: bool = True) -> PreparedExperiment:
        """Runs every stage up to (and optionally including) the batch solve and the step-size choice."""
        fourth_order = fourth_order or config.step_size_rule == "mean_square"
        kernel = GaussianKernel(config.kernel_bandwidth)
        model, true_row = self.build_model(config)
        dictionary = self.build_dictionary(config, model, kernel)
        if config.moment_source == "sampled":
            context = None
            moments, key = self.sample_moments(config, model, kernel, dictionary, fourth_order)
        else:
            covariance = self.input_covariance(config, model)
            context, moments, key = self.compute_moments(covariance, kernel, dictionary, fourth_order)
        prepared = PreparedExperiment(config, model, true_row, kernel, dictionary, context, moments, key)
        if solve:
            prepared.gamma_star = self.solve_gamma(moments, config.regularization, key)
            prepared.step_size, prepared.mean_square_radius = self.choose_step_size(config, moments)
        return prepared

    def run_experiment(self, config: ExperimentConfig) -> RunArtifacts:
        prepared = self.prepare(config)
        spec = EnsembleSpec(
            model=prepared.model,
            node=config.node_index,
            kernel=prepared.kernel,
            dictionary=prepared.dictionary,
            step_size=prepared.step_size,
            reg_weight=config.regularization,
            forgetting=config.forgetting,
            horizon=config.horizon,
            exact_rtt=prepared.moments.R_tt if config.use_exact_rtt else None,
            divergence_threshold=config.divergence_threshold,
        )
        radius = "n/a" if prepared.mean_square_radius is None else f"{prepared.mean_square_radius:.6f}"
        self.output_handler.print_message(
            f"Running {config.runs} realizations of {config.horizon} steps (mu = {prepared.step_size:.4g}, "
            f"eta = {config.regularization:g}, spectral radius of F0 = {radius}).", style='info')

        with ThreadPoolExecutor(max_workers=1) as pool:
            theory_future = pool.submit(self.predict, prepared)
            results = self.simulate(spec, config)
            curves, steady = theory_future.result()

        artifacts = aggregate(results, curves, steady, prepared)
        if artifacts.diverged_runs == config.runs:
            self.output_handler.show_warning(
                f"All {config.runs} runs diverged; the ensemble curves are undefined.")
        elif artifacts.diverged_runs:
            self.output_handler.show_warning(
                f"{artifacts.diverged_runs} of {config.runs} runs diverged and are left out of the ensemble curves.")
        self.output_handler.display_dataframe(summary_table(artifacts), title="Experiment summary")
        return artifacts


def aggregate(results: List[RealizationResult], curves: TheoryCurves, steady: Optional[float],
              prepared: PreparedExperiment) -> RunArtifacts:
    """
    Deterministic reduction in run-index order. Ensemble curves average the
    runs that stayed bounded; they are all-NaN when every run diverged.
    """
    gamma_star = prepared.gamma_star
    stable = [r for r in results if not r.diverged]
    horizon, k_s = results[0].trajectory.shape
    if stable:
        trajectories = np.stack([r.trajectory for r in stable])
        gamma_emp = trajectories.mean(axis=0)
        msd_emp = np.sum((trajectories - gamma_star) ** 2, axis=2).mean(axis=0)
    else:
        gamma_emp = np.full((horizon, k_s), np.nan)
        msd_emp = np.full(horizon, np.nan)
    if len(stable) > 1:
        stderr = trajectories.std(axis=0, ddof=1) / np.sqrt(len(stable))
    else:
        stderr = np.zeros_like(gamma_emp)

    finished = [r.final_delta for r in stable]
    if finished:
        delta_final = np.mean(np.stack(finished), axis=0)
    else:
        delta_final = np.full(prepared.true_row.size, np.nan)
    threshold = largest_gap_threshold(np.nan_to_num(delta_final))
    adjacency_hat = (delta_final >= threshold).astype(int)
    hits = sum(
        int(np.array_equal((d >= largest_gap_threshold(d)).astype(int), prepared.true_row))
        for d in finished
    )

    return RunArtifacts(
        gamma_emp=gamma_emp,
        gamma_emp_stderr=stderr,
        msd_emp=msd_emp,
        gamma_theo=curves.gamma_mean,
        msd_theo=curves.msd,
        gamma_star=gamma_star,
        delta_final=delta_final,
        adjacency_hat=adjacency_hat,
        threshold=threshold,
        step_size=prepared.step_size,
        runs=len(results),
        msd_steady=steady,
        mean_square_radius=prepared.mean_square_radius,
        true_row=prepared.true_row,
        topology_hits=hits,
        diverged_runs=sum(r.diverged for r in results),
    )


def summary_table(artifacts: RunArtifacts) -> pd.DataFrame:
    comparison = compare_curves(artifacts.msd_emp, artifacts.msd_theo)
    rows = [
        ("runs", artifacts.runs),
        ("diverged runs", artifacts.diverged_runs),
        ("step size", artifacts.step_size),
        ("spectral radius of F0", np.nan if artifacts.mean_square_radius is None else artifacts.mean_square_radius),
        ("final MSD (ensemble)", artifacts.msd_emp[-1]),
        ("final MSD (model)", artifacts.msd_theo[-1]),
        ("max MSD gap after burn-in (dB)", comparison.max_gap_db),
        ("steady-state MSD", np.nan if artifacts.msd_steady is None else artifacts.msd_steady),
        ("recovered row", " ".join(str(a) for a in artifacts.adjacency_hat)),
        ("true row", " ".join(str(a) for a in artifacts.true_row) if artifacts.true_row is not None else "-"),
        ("runs recovering the true row", artifacts.topology_hits),
    ]
    return pd.DataFrame(rows, columns=["quantity", "value"])
