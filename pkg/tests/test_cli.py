import csv
import filecmp

import numpy as np
import pytest

from spectral_cmm import cli
from spectral_cmm.config import ExperimentConfig
from spectral_cmm.pipeline import ResultRow, read_rows

TINY = ["--epochs", "3", "--J", "3", "--hidden", "8", "--batch-size", "64", "--patience", "2",
        "--alpha", "1", "--lambda", "1", "--nu", "1", "--bw-x", "1", "--bw-z", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_parse_list_and_ladder():
    assert cli.parse_list("1..4", int) == [1, 2, 3, 4]
    assert cli.parse_list("0.5,2") == [0.5, 2.0]
    ladder = cli.parse_ladder("1e-4..1", 5)
    assert np.allclose(ladder, [1e-4, 1e-3, 1e-2, 1e-1, 1])


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--n", 200, "--seed", 3, "--out", tmp_path / name) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list and not cmp.diff_files
    for f in cmp.common_files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_gen_data_refuses_non_empty_directory(tmp_path, capsys):
    assert run("gen-data", "--n", 40, "--out", tmp_path / "d") == 0
    assert run("gen-data", "--n", 40, "--out", tmp_path / "d") == 1
    assert "force" in capsys.readouterr().err
    assert run("gen-data", "--n", 40, "--out", tmp_path / "d", "--force") == 0


def test_gen_data_proxy_dimensions(tmp_path, capsys):
    assert run("gen-data", "--dgp", "proxy", "--d-ex", 2, "--n", 40, "--out", tmp_path / "p") == 0
    assert "z dim 13, x dim 13" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert run("oracle", "nonsense") == 1
    assert run("gen-data", "--rho", "abc") == 1
    assert run() == 1


def test_numerical_failure_exit_code(monkeypatch):
    from spectral_cmm.errors import DegenerateMatrix, NumericalFailure

    def boom(args, cfg):
        raise NumericalFailure("nan loss")

    monkeypatch.setitem(cli.COMMANDS, "print-config", boom)
    assert run("print-config") == 2

    def degenerate(args, cfg):
        raise DegenerateMatrix("singular")

    monkeypatch.setitem(cli.COMMANDS, "print-config", degenerate)
    assert run("print-config") == 3


def test_print_config_round_trip(tmp_path, capsys):
    assert run("print-config", "--rho", 0.3, "--J", "4,6", "--theory") == 0
    text = capsys.readouterr().out
    path = tmp_path / "c.toml"
    path.write_text(text)
    cfg = ExperimentConfig.load(path)
    assert cfg.data.rho == 0.3 and cfg.spectral.J_grid == [4, 6] and cfg.kernel.alpha_prime == "one"
    assert run("print-config", "--config", path) == 0
    assert capsys.readouterr().out == text


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    path = tmp_path / "c.toml"
    path.write_text("seed = 5\n")
    monkeypatch.setenv("SPECTRAL_CMM_SEED", "7")
    run("print-config", "--config", path)
    assert "seed = 7" in capsys.readouterr().out
    run("print-config", "--config", path, "--seed", 9)
    assert "seed = 9" in capsys.readouterr().out


def test_oracle_transition_csv(tmp_path):
    out = tmp_path / "t.csv"
    assert run("oracle", "transition", "--M", "1..8", "--J", 3, "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    gaps = np.array([float(r["gap"]) for r in rows])
    measure = np.array([float(r["measure"]) for r in rows])
    assert np.all(np.diff(gaps) > 0) and np.all(gaps < 0.7 ** 6)
    assert np.allclose(measure, 0.7 ** -(3 + np.arange(1, 9)), rtol=1e-10)


def test_oracle_stdout(capsys):
    assert run("oracle", "modulus-sweep", "--points", 3, "--K", 20) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4


def test_percentile_summary():
    rows = [ResultRow("e", "m", 10, 1, "mse", v, s) for s, v in enumerate([1.0, 2.0, 3.0])]
    (cell,) = cli.percentile_summary(rows, {"e": 1})
    assert cell["p50"] == 2.0 and cell["count"] == 3 and cell["failures"] == 1
    assert cell["p25"] == 1.5 and cell["p75"] == 2.5


def test_fit_learned_without_model_is_invalid(tmp_path):
    run("gen-data", "--n", 80, "--out", tmp_path / "d")
    assert run("fit", "--data", tmp_path / "d", "--kernel", "learned", "--out", tmp_path / "f") == 1


def test_end_to_end_is_deterministic(tmp_path):
    data = tmp_path / "d"
    assert run("gen-data", "--n", 300, "--seed", 1, "--out", data) == 0
    for tag in ("a", "b"):
        assert run("train", "--data", data, "--seed", 1, "--out", tmp_path / f"m{tag}.json", *TINY) == 0
        assert run("eval", "--data", data, "--seed", 1, "--model", tmp_path / f"m{tag}.json",
                   "--out", tmp_path / f"r{tag}.csv", *TINY) == 0
    assert filecmp.cmp(tmp_path / "ma.json", tmp_path / "mb.json", shallow=False)
    a, b = read_rows(tmp_path / "ra.csv"), read_rows(tmp_path / "rb.csv")
    assert a == b
    assert {r.method for r in a} >= {"learned", "rbf"}
    assert all(r.experiment == "npiv-rho0.7-n150-dim1" for r in a)


def test_fit_rbf_writes_grid(tmp_path):
    run("gen-data", "--n", 120, "--out", tmp_path / "d")
    assert run("fit", "--data", tmp_path / "d", "--kernel", "rbf", "--out", tmp_path / "f",
               "--bw-x", "1,2") == 0
    assert (tmp_path / "f" / "selection.json").exists()
    with open(tmp_path / "f" / "grid.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2 * 3 * 3 * 3


def test_sweep_writes_summary(tmp_path):
    out = tmp_path / "s"
    assert run("sweep", "--seeds", "0..1", "--n-axis", "80,120", "--out", out, *TINY) == 0
    rows = read_rows(out / "rows.csv")
    assert {r.seed for r in rows} == {0, 1} and {r.n for r in rows} == {40, 60}
    with open(out / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert all(int(s["count"]) == 2 for s in summary)
    assert run("sweep", "--seeds", "0", "--out", out) == 1
