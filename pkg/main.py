import argparse
import logging
import sys

import pandas as pd
from rich.logging import RichHandler

from src.topology_inference.artifacts import compare_curves, emit_outputs, load_curve, render_plots
from src.topology_inference.config import Config, load_experiment_config
from src.topology_inference.errors import ConfigError, StageError, TopologyInferenceError
from src.topology_inference.experiment import ExperimentRunner
from src.topology_inference.output.console_output_handler import ConsoleOutputHandler
from src.topology_inference.stages import get_registered_stages
from src.topology_inference.utils import validate_config_paths


def configure_logging(verbose: bool):
    level = logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL.upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(rich_tracebacks=True)], force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Online graph topology inference with derivative kernels, and its convergence model."
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Show debug logging from every stage.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run the Monte-Carlo ensemble and the model curves for one config.")
    run.add_argument("--config", required=True, help="Experiment file (e.g., configs/linear_eta0.toml)")
    run.add_argument("--out", help="Output directory (overrides 'output_dir')")
    run.add_argument("--runs", type=int, help="Number of Monte-Carlo runs (overrides 'runs')")
    run.add_argument("--seed", type=int, help="Master seed (overrides 'seed')")
    run.add_argument("--n-jobs", type=int, help="Parallel workers for the ensemble (overrides 'n_jobs')")
    run.add_argument("--plot", action="store_true", help="Also render PNG figures into <out>/plots.")

    moments = commands.add_parser("moments", help="Compute (or load) the cached feature moments.")
    moments.add_argument("--config", required=True)

    solve = commands.add_parser("solve-gamma", help="Solve the batch problem for the optimal coefficients.")
    solve.add_argument("--config", required=True)

    compare = commands.add_parser("compare", help="dB gap between two curves stored in CSV files.")
    compare.add_argument("--a", required=True, help="CSV with the empirical curve")
    compare.add_argument("--b", required=True, help="CSV with the reference curve")
    compare.add_argument("--column-a", default="msd_emp")
    compare.add_argument("--column-b", default="msd_theo")
    compare.add_argument("--burn-in", type=int, help="Iterations skipped before taking the maximum")

    commands.add_parser("stages", help="List the registered pipeline stages.")
    return parser


def _load_config(path: str):
    problems = validate_config_paths([path])
    if problems:
        raise ConfigError("; ".join(problems))
    return load_experiment_config(path)


def cmd_run(args, output_handler) -> int:
    config = _load_config(args.config).with_overrides(
        runs=args.runs, seed=args.seed, output_dir=args.out, n_jobs=args.n_jobs)
    runner = ExperimentRunner(output_handler)
    artifacts = runner.run_experiment(config)
    paths = emit_outputs(artifacts, config.output_dir)
    if args.plot:
        for path in render_plots(config.output_dir):
            output_handler.display_plot(str(path), title=path.stem)
    output_handler.show_success(f"Wrote {len(paths)} files to '{config.output_dir}'.")
    return 0


def cmd_moments(args, output_handler) -> int:
    config = _load_config(args.config)
    runner = ExperimentRunner(output_handler)
    prepared = runner.prepare(config, solve=False)
    output_handler.show_success(
        f"Moments ready for k_s = {prepared.moments.feature_length} (cache key {prepared.cache_key}).")
    return 0


def cmd_solve_gamma(args, output_handler) -> int:
    config = _load_config(args.config)
    runner = ExperimentRunner(output_handler)
    prepared = runner.prepare(config, fourth_order=False)
    gamma = prepared.gamma_star
    df = pd.DataFrame({"index": range(1, gamma.size + 1), "gamma_star": gamma})
    output_handler.display_dataframe(df, title=f"gamma* (eta = {config.regularization:g})")
    output_handler.print_message(f"Step size used by 'run': {prepared.step_size:.6g}", style='info')
    if prepared.mean_square_radius is not None:
        output_handler.print_message(
            f"Spectral radius of F0 at that step size: {prepared.mean_square_radius:.6f}", style='info')
    return 0


def cmd_compare(args, output_handler) -> int:
    a = load_curve(args.a, args.column_a)
    b = load_curve(args.b, args.column_b)
    report = compare_curves(a, b, burn_in=args.burn_in)
    df = pd.DataFrame({"segment": range(1, report.segment_gaps_db.size + 1), "max_gap_db": report.segment_gaps_db})
    output_handler.display_dataframe(df, title="Per-segment gaps (dB)")
    output_handler.print_message(
        f"Max gap after burn-in {report.burn_in}: {report.max_gap_db:.3f} dB "
        f"({report.excluded} nonpositive points excluded).", style='info')
    return 0


def cmd_stages(args, output_handler) -> int:
    stages = get_registered_stages()
    df = pd.DataFrame({
        "stage": [s["name"] for s in stages],
        "description": [s["description"] for s in stages],
        "function": [s["function"] for s in stages],
    })
    output_handler.display_dataframe(df, title="Pipeline stages")
    return 0


COMMANDS = {
    "run": cmd_run,
    "moments": cmd_moments,
    "solve-gamma": cmd_solve_gamma,
    "compare": cmd_compare,
    "stages": cmd_stages,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    output_handler = ConsoleOutputHandler()
    try:
        return COMMANDS[args.command](args, output_handler)
    except ConfigError as e:
        output_handler.show_error(f"Configuration error: {e}")
        return 2
    except StageError as e:
        if isinstance(e.cause, ConfigError):
            output_handler.show_error(f"Configuration error: {e}")
            return 2
        output_handler.show_error(str(e))
        return 1
    except (TopologyInferenceError, KeyError, OSError, ValueError) as e:
        output_handler.show_error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
