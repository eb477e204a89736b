import json
import subprocess
import sys

import numpy as np
import pytest

from ability_trace import cli
from ability_trace.core import ConvergenceError
from ability_trace.data import read_generic_panel
from ability_trace.growth import GrowthModel, estimate_new_respondent


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--respondents", 80, "--iterations", 10, "--seed", 4, "--out", out) == 0
    return out


def generic_args(sim_dir):
    return ["--input", sim_dir / "panel.csv", "--format", "generic", "--truth", sim_dir / "truth.csv"]


# --- ingest ------------------------------------------------------------------


def test_ingest_fixture(chess_fixture, tmp_path, capsys):
    assert run("ingest", "--input", chess_fixture, "--format", "chess", "--out", tmp_path) == 0
    draws = sum(1 for line in chess_fixture.read_text().splitlines() if line.endswith(",draw"))
    summary = capsys.readouterr().out
    assert f"rejected_rows={draws}" in summary and "respondents=20" in summary
    assert (tmp_path / "panel.csv").is_file() and (tmp_path / "truth.csv").is_file()
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["summary"]["rejected_rows"] == draws > 0


def test_ingest_missing_file(tmp_path):
    assert run("ingest", "--input", tmp_path / "nope.csv", "--format", "chess", "--out", tmp_path) == 2


def test_ingest_malformed_row(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("player_id,month_index,player_rating_pre,opponent_rating,outcome\np1,1,1500,x,win\n")
    assert run("ingest", "--input", bad, "--format", "chess", "--min-months", 1, "--out", tmp_path / "o") == 2
    assert "line 2" in capsys.readouterr().err


# --- simulate / fit / estimate -----------------------------------------------


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("simulate", "--respondents", 30, "--iterations", 6, "--seed", 9, "--out", out) == 0
    for name in ("panel.csv", "truth.csv", "metadata.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() if name != "metadata.json" else True
    meta_a = json.loads((a / "metadata.json").read_text())
    meta_b = json.loads((b / "metadata.json").read_text())
    meta_a.pop("out"), meta_b.pop("out")
    assert meta_a == meta_b


def test_fit_growth_shape(sim_dir, tmp_path):
    model_path = tmp_path / "growth.json"
    assert run("fit", *generic_args(sim_dir), "--method", "growth", "--out", model_path) == 0
    doc = json.loads(model_path.read_text())
    assert len(doc["iterations"]) == 10
    assert all({"mu", "sigma"} <= set(it) for it in doc["iterations"])


def test_fit_unknown_method(sim_dir, tmp_path):
    assert run("fit", *generic_args(sim_dir), "--method", "bkt", "--out", tmp_path / "m.json") == 2


def test_fit_glmm_quadrature_sensitivity(sim_dir, tmp_path):
    for nodes in (1, 9):
        assert run("fit", *generic_args(sim_dir), "--method", "glmm", "--nodes", nodes, "--out", tmp_path / f"g{nodes}.json") == 0
    s1 = json.loads((tmp_path / "g1.json").read_text())["sigma2"]
    s9 = json.loads((tmp_path / "g9.json").read_text())["sigma2"]
    assert np.isfinite(s1 - s9) and abs(s1 - s9) < 0.2


def test_fit_numerical_failure_exit_code(sim_dir, tmp_path, monkeypatch):
    def fail(*args, **kwargs):
        raise ConvergenceError("did not converge")

    monkeypatch.setattr(cli, "fit_glmm", fail)
    assert run("fit", *generic_args(sim_dir), "--method", "glmm", "--out", tmp_path / "g.json") == 3


def test_estimate_prefix_matches_library(sim_dir, tmp_path):
    model_path = tmp_path / "growth.json"
    assert run("fit", *generic_args(sim_dir), "--method", "growth", "--all", "--out", model_path) == 0
    out = tmp_path / "est.csv"
    assert run("estimate", "--model", model_path, "--input", sim_dir / "panel.csv", "--prefix", 5, "--out", out) == 0
    lines = out.read_text().strip().splitlines()[1:]
    panel = read_generic_panel(sim_dir / "panel.csv")
    assert len(lines) == 5 * panel.n_respondents
    model = GrowthModel.from_json(model_path.read_text())
    rid, responses = next(panel.sequences())
    lib = estimate_new_respondent(model, list(responses)[:5])
    got = [float(line.split(",")[2]) for line in lines[:5]]
    assert got == [e.theta_hat for e in lib]


@pytest.mark.parametrize("method", ["elo", "glmm"])
def test_estimate_other_models(sim_dir, tmp_path, method):
    model_path = tmp_path / f"{method}.json"
    assert run("fit", *generic_args(sim_dir), "--method", method, "--out", model_path) == 0
    out = tmp_path / "est.csv"
    assert run("estimate", "--model", model_path, "--input", sim_dir / "panel.csv", "--prefix", 3, "--out", out) == 0
    assert len(out.read_text().strip().splitlines()) == 1 + 3 * 80


def test_estimate_bad_model(sim_dir, tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert run("estimate", "--model", bad, "--input", sim_dir / "panel.csv", "--out", tmp_path / "e.csv") == 2
    assert run("estimate", "--model", tmp_path / "none.json", "--input", sim_dir / "panel.csv", "--out", tmp_path / "e.csv") == 2


# --- sweep / benchmark -------------------------------------------------------


def test_sweep_default_grid(sim_dir, tmp_path):
    assert run("sweep-k", *generic_args(sim_dir), "--method", "elo", "--out", tmp_path) == 0
    rows = (tmp_path / "sweep_elo.csv").read_text().strip().splitlines()
    assert len(rows) == 16


@pytest.mark.parametrize(
    "extra",
    [["--k-grid", "0.1,abc"], ["--k-grid", "0.1,-0.2"], ["--scenario", "3"], ["--test-fraction", "1.5"], ["--method", "glmm"]],
)
def test_sweep_usage_errors(sim_dir, tmp_path, extra):
    assert run("sweep-k", *generic_args(sim_dir), *extra, "--out", tmp_path) == 2


def test_generic_needs_truth_for_benchmark(sim_dir, tmp_path):
    assert run("benchmark", "--input", sim_dir / "panel.csv", "--out", tmp_path) == 2


def test_benchmark_unknown_method(sim_dir, tmp_path):
    assert run("benchmark", *generic_args(sim_dir), "--method", "growth,bkt", "--out", tmp_path) == 2


def bench(chess_fixture, out, *extra):
    return run("benchmark", "--input", chess_fixture, "--format", "chess", "--seed", 3, "--repeats", 1, *extra, "--out", out)


REPRODUCIBLE = ("rmse_table.csv", "rmse_long.csv", "report.json")


def test_benchmark_fixture_reproducible(chess_fixture, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert bench(chess_fixture, a) == 0
    assert bench(chess_fixture, b) == 0
    for name in REPRODUCIBLE:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header, *rows = (a / "rmse_table.csv").read_text().strip().splitlines()
    assert header.split(",")[0] == "iteration" and len(header.split(",")) == 6 and len(rows) == 50
    assert all(np.isfinite(float(v)) for row in rows for v in row.split(",")[1:])
    assert (a / "timings.csv").is_file()


def test_benchmark_thread_cap_does_not_change_results(sim_dir, tmp_path, monkeypatch):
    methods = ["--method", "growth,elo,glmm_ml"]
    monkeypatch.setenv("ABILITY_TRACE_THREADS", "1")
    assert run("benchmark", *generic_args(sim_dir), *methods, "--repeats", 1, "--out", tmp_path / "one") == 0
    monkeypatch.setenv("ABILITY_TRACE_THREADS", "4")
    assert run("benchmark", *generic_args(sim_dir), *methods, "--repeats", 1, "--out", tmp_path / "four") == 0
    for name in REPRODUCIBLE:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "four" / name).read_bytes()


def test_bad_thread_setting_is_usage_error(sim_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("ABILITY_TRACE_THREADS", "many")
    assert run("fit", *generic_args(sim_dir), "--method", "growth", "--out", tmp_path / "m.json") == 2


def test_benchmark_failure_exit_code(sim_dir, tmp_path, monkeypatch):
    from ability_trace import evaluation

    def fail(*args, **kwargs):
        raise ConvergenceError("no")

    monkeypatch.setattr(evaluation, "fit_glmm", fail)
    assert run("benchmark", *generic_args(sim_dir), "--method", "elo,glmm_ml", "--repeats", 1, "--out", tmp_path) == 3
    assert (tmp_path / "report.json").is_file()


def test_no_command_is_usage_error():
    assert run() == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "ability_trace.cli", "simulate", "--respondents", "5", "--iterations", "3", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "panel.csv").is_file()
