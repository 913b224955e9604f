import pandas as pd

from main import main

SMALL_TOML = """
model = "custom"
adjacency = [[0, 1, 1], [0, 0, 0], [0, 0, 0]]
noise_std = 0.5
node = 1
step_size_fraction = 0.1
runs = 3
horizon = 60
seed = 1
n_jobs = 1

[dictionary]
size = 2
seed = 3
"""


def _write_config(tmp_path, text=SMALL_TOML):
    path = tmp_path / "small.toml"
    path.write_text(text)
    return str(path)


def test_run_writes_outputs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    out = tmp_path / "out"
    assert main(["run", "--config", _write_config(tmp_path), "--out", str(out), "--runs", "2"]) == 0
    for name in ("mean_curves.csv", "msd.csv", "topology.csv", "theory.csv", "plot_curves.py"):
        assert (out / name).exists()
    assert len(pd.read_csv(out / "msd.csv")) == 60
    assert "spectral radius of F0" in capsys.readouterr().out


def test_moments_and_solve_gamma(tmp_path, capsys):
    config = _write_config(tmp_path)
    assert main(["moments", "--config", config]) == 0
    assert main(["solve-gamma", "--config", config]) == 0
    assert "gamma*" in capsys.readouterr().out


def test_compare(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    pd.DataFrame({"iter": range(20), "msd_emp": [2.0] * 20, "msd_theo": [1.0] * 20}).to_csv(
        tmp_path / "msd.csv", index=False)
    path = str(tmp_path / "msd.csv")
    assert main(["compare", "--a", path, "--b", path]) == 0
    assert "3.010 dB" in capsys.readouterr().out
    assert main(["compare", "--a", path, "--b", path, "--column-a", "nope"]) == 1


def test_configuration_errors_exit_with_two(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = _write_config(tmp_path, "step_size = 0.1\nunknown_key = 1\n")
    assert main(["run", "--config", bad]) == 2


def test_stage_errors_exit_with_one(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    singular = SMALL_TOML.replace("[[0, 1, 1], [0, 0, 0], [0, 0, 0]]", "[[0, 1, 0], [1, 0, 0], [0, 0, 0]]")
    assert main(["run", "--config", _write_config(tmp_path, singular), "--out", str(tmp_path / "o")]) == 1
    assert "[model]" in capsys.readouterr().out


def test_stages_listing(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    assert main(["stages"]) == 0
    out = capsys.readouterr().out
    assert "gamma_star" in out and "ensemble" in out
