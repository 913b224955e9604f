import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import matplotlib
import numpy as np
import pandas as pd

from src.topology_inference.config import Config
from src.topology_inference.utils import to_db

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import seaborn as sns  # noqa: E402


@dataclass(eq=False)
class RunArtifacts:
    """
    Aggregated outputs of one experiment; every curve has `horizon` points,
    point i being the estimate before sample i is processed.
    """
    gamma_emp: np.ndarray
    gamma_emp_stderr: np.ndarray
    msd_emp: np.ndarray
    gamma_theo: np.ndarray
    msd_theo: np.ndarray
    gamma_star: np.ndarray
    delta_final: np.ndarray
    adjacency_hat: np.ndarray
    threshold: float
    step_size: float
    runs: int
    msd_steady: Optional[float] = None
    mean_square_radius: Optional[float] = None
    true_row: Optional[np.ndarray] = None
    topology_hits: int = 0
    diverged_runs: int = 0

    @property
    def horizon(self) -> int:
        return self.msd_emp.size

    @property
    def feature_length(self) -> int:
        return self.gamma_star.size

    @property
    def mean_v_theo(self) -> np.ndarray:
        return self.gamma_theo - self.gamma_star


@dataclass(frozen=True, eq=False)
class CurveComparison:
    max_gap_db: float
    segment_gaps_db: np.ndarray
    gaps_db: np.ndarray
    burn_in: int
    excluded: int


def compare_curves(empirical: np.ndarray, theoretical: np.ndarray, burn_in: Optional[int] = None,
                   segments: int = 10) -> CurveComparison:
    """
    gap(i) = |10 log10 emp(i) - 10 log10 theo(i)|; the maximum is taken over
    i >= burn_in (default horizon // 10). Points where either curve is
    nonpositive are excluded and counted.
    """
    empirical = np.asarray(empirical, dtype=float)
    theoretical = np.asarray(theoretical, dtype=float)
    if empirical.shape != theoretical.shape:
        raise ValueError(f"Curves differ in length: {empirical.shape} vs {theoretical.shape}.")
    if burn_in is None:
        burn_in = empirical.size // 10

    gaps = np.abs(to_db(empirical) - to_db(theoretical))
    window = gaps[burn_in:]
    valid = np.isfinite(window)
    excluded = int(np.sum(~valid))
    max_gap = float(window[valid].max()) if np.any(valid) else float("nan")

    chunks = np.array_split(window, segments) if window.size >= segments else [window]
    segment_gaps = np.array([np.nanmax(c) if np.any(np.isfinite(c)) else np.nan for c in chunks])
    return CurveComparison(max_gap, segment_gaps, gaps, burn_in, excluded)


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, float_format=Config.CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def emit_outputs(artifacts: RunArtifacts, directory: Union[str, Path]) -> List[Path]:
    """
    Writes mean_curves.csv, msd.csv, topology.csv, theory.csv and plot_curves.py.
    """
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    k_s = artifacts.feature_length
    iterations = np.arange(artifacts.horizon)

    mean_curves = pd.DataFrame({"iter": iterations})
    for j in range(k_s):
        mean_curves[f"gamma_emp_{j + 1}"] = artifacts.gamma_emp[:, j]
    for j in range(k_s):
        mean_curves[f"gamma_theo_{j + 1}"] = artifacts.gamma_theo[:, j]

    steady = np.nan if artifacts.msd_steady is None else artifacts.msd_steady
    msd = pd.DataFrame({
        "iter": iterations,
        "msd_emp": artifacts.msd_emp,
        "msd_theo": artifacts.msd_theo,
        "msd_ss": np.full(artifacts.horizon, steady),
    })

    topology = pd.DataFrame({
        "m": np.arange(1, artifacts.delta_final.size + 1),
        "delta_m": artifacts.delta_final,
        "a_hat": artifacts.adjacency_hat.astype(int),
    })

    theory = pd.DataFrame({"iter": iterations})
    mean_v = artifacts.mean_v_theo
    for j in range(k_s):
        theory[f"ev_{j + 1}"] = mean_v[:, j]
    theory["msd"] = artifacts.msd_theo

    paths = [
        _write_csv(mean_curves, directory / "mean_curves.csv"),
        _write_csv(msd, directory / "msd.csv"),
        _write_csv(topology, directory / "topology.csv"),
        _write_csv(theory, directory / "theory.csv"),
    ]
    script = directory / "plot_curves.py"
    script.write_text(PLOT_SCRIPT)
    paths.append(script)
    return paths


def load_curve(path: Union[str, Path], column: str) -> np.ndarray:
    df = pd.read_csv(path)
    if column not in df.columns:
        raise KeyError(f"Column '{column}' not found in '{path}'. Available: {', '.join(df.columns)}.")
    return df[column].to_numpy(dtype=float)


def render_plots(directory: Union[str, Path], coefficients: int = 6) -> List[Path]:
    """
    Draws the MSD comparison (dB) and the first few mean-coefficient curves
    from emitted CSVs into <directory>/plots.
    """
    directory = Path(directory)
    plots_dir = directory / Config.PLOTS_DIR
    os.makedirs(plots_dir, exist_ok=True)
    msd = pd.read_csv(directory / "msd.csv")
    means = pd.read_csv(directory / "mean_curves.csv")
    outputs = []

    plt.figure(figsize=(10, 6))
    try:
        long = msd.melt(id_vars="iter", value_vars=["msd_emp", "msd_theo", "msd_ss"],
                        var_name="curve", value_name="msd").dropna()
        long = long[long["msd"] > 0].copy()
        long["msd_db"] = 10 * np.log10(long["msd"])
        sns.lineplot(data=long, x="iter", y="msd_db", hue="curve")
        plt.title("Mean square deviation")
        plt.xlabel("iteration")
        plt.ylabel("MSD (dB)")
        plt.tight_layout()
        path = plots_dir / "msd.png"
        plt.savefig(path)
        outputs.append(path)
    finally:
        plt.close()

    k_s = sum(1 for c in means.columns if c.startswith("gamma_emp_"))
    chosen = range(1, min(coefficients, k_s) + 1)
    plt.figure(figsize=(10, 6))
    try:
        palette = sns.color_palette(n_colors=len(chosen))
        for color, j in zip(palette, chosen):
            plt.plot(means["iter"], means[f"gamma_emp_{j}"], color=color, alpha=0.6)
            plt.plot(means["iter"], means[f"gamma_theo_{j}"], color=color, linestyle="--")
        plt.title("Mean coefficients (solid: ensemble, dashed: model)")
        plt.xlabel("iteration")
        plt.ylabel("E{gamma_hat}")
        plt.tight_layout()
        path = plots_dir / "mean_coefficients.png"
        plt.savefig(path)
        outputs.append(path)
    finally:
        plt.close()
    return outputs


PLOT_SCRIPT = '''"""Plots the curves written next to this script. Usage: python plot_curves.py [coefficients...]"""
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

here = Path(__file__).resolve().parent
msd = pd.read_csv(here / "msd.csv")
means = pd.read_csv(here / "mean_curves.csv")
chosen = [int(a) for a in sys.argv[1:]] or [1, 2, 3]

fig, (ax_mean, ax_msd) = plt.subplots(1, 2, figsize=(12, 5))
for j in chosen:
    line, = ax_mean.plot(means["iter"], means[f"gamma_emp_{j}"], alpha=0.6, label=f"emp {j}")
    ax_mean.plot(means["iter"], means[f"gamma_theo_{j}"], "--", color=line.get_color(), label=f"theo {j}")
ax_mean.set_xlabel("iteration")
ax_mean.set_ylabel("mean coefficient")
ax_mean.legend()

for column, style in (("msd_emp", "-"), ("msd_theo", "--"), ("msd_ss", ":")):
    values = msd[column].to_numpy(dtype=float)
    if np.all(np.isnan(values)):
        continue
    ax_msd.plot(msd["iter"], 10 * np.log10(values), style, label=column)
ax_msd.set_xlabel("iteration")
ax_msd.set_ylabel("MSD (dB)")
ax_msd.legend()

fig.tight_layout()
fig.savefig(here / "curves.png")
plt.show()
'''
