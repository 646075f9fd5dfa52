import os

import pandas as pd
import pytest

from main import build_parser, run


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run(
        ["simulate", "--regime", "1", "--n", "300", "--seed", "1", "--output-dir", str(out), "--no-plots"]
    )
    assert code == 0
    return out


def test_simulate_writes_panel_and_truth(simulated):
    for name in ("panel.csv", "counterfactual_untreated.csv", "truth.csv"):
        assert os.path.exists(simulated / name)
    panel = pd.read_csv(simulated / "panel.csv", dtype={"id": str})
    assert panel["id"].iloc[0] == "00001"


def test_att_from_simulated_panel(simulated, tmp_path, capsys):
    code = run(
        [
            "att",
            "--input",
            str(simulated / "panel.csv"),
            "--covariates",
            "L",
            "--output-dir",
            str(tmp_path),
            "--no-plots",
        ]
    )
    assert code == 0
    curve = pd.read_csv(tmp_path / "att_shortcut.csv")
    assert curve["t"].tolist() == list(range(len(curve)))
    assert os.path.exists(tmp_path / "mediation.csv")
    assert "att_shortcut.csv" in capsys.readouterr().out


def test_no_treated_exit_code(tmp_path, capsys):
    frame = pd.DataFrame(
        {
            "id": ["a", "a", "b", "b"],
            "t": [0, 1, 0, 1],
            "treat": [0, 0, 0, 0],
            "event": [0, 1, 0, 0],
            "censor": [0, 0, 0, 1],
            "L": [1.0, 2.0, 3.0, 4.0],
        }
    )
    path = tmp_path / "untreated.csv"
    frame.to_csv(path, index=False)
    argv = ["att", "--input", str(path), "--covariates", "L"]
    code = run(argv + ["--output-dir", str(tmp_path / "out"), "--no-plots"])
    assert code == 5
    assert "no treated person-time" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path):
    code = run(["att", "--input", str(tmp_path / "absent.csv"), "--output-dir", str(tmp_path)])
    assert code == 3


def test_simulate_without_seed_is_a_config_error(tmp_path):
    assert run(["simulate", "--output-dir", str(tmp_path)]) == 2


def test_benchmark_is_deterministic(tmp_path):
    tables = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        argv = ["benchmark", "--reps", "1", "--n", "150", "--seed", "5", "--regimes", "1"]
        argv += ["--output-dir", str(out), "--no-plots", "--threads", str(k + 1)]
        assert run(argv) == 0
        tables.append((out / "benchmark_table.csv").read_bytes())
    assert tables[0] == tables[1]


def test_help_lists_exit_codes():
    text = build_parser().format_help()
    assert "no_treated_person_time" in text
