import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ability_trace.core import InvalidArgumentError, ResponsePanel, rating_to_theta
from ability_trace.data import (
    IngestError,
    ScenarioSpec,
    build_scenario,
    generate_synthetic,
    growth_curve,
    ingest_game_records,
    panel_to_text,
    read_generic_panel,
    read_truth,
    split_respondents,
    thin,
    truth_to_text,
)

HEADER = "player_id,month_index,player_rating_pre,opponent_rating,outcome\n"


def chess(rows):
    return io.StringIO(HEADER + "".join(r + "\n" for r in rows))


# --- ingestion ---------------------------------------------------------------


def test_single_row_transform():
    result = ingest_game_records(chess(["p1,1,1500,1900,loss"]), min_active_months=1)
    r = result.panel.responses("p1")[0]
    assert r.difficulty == pytest.approx(2.302585, abs=1e-6)
    assert r.difficulty == pytest.approx(math.log(10), abs=1e-15)
    assert r.outcome == 0
    assert result.truth[0, 0] == 0.0


def test_duplicate_month_is_an_error():
    with pytest.raises(IngestError) as info:
        ingest_game_records(chess(["p1,1,1500,1900,loss", "p1,1,1500,1700,win"]), min_active_months=1)
    assert info.value.line == 3


def test_out_of_order_months_are_an_error():
    with pytest.raises(IngestError):
        ingest_game_records(chess(["p1,2,1500,1900,loss", "p1,1,1500,1700,win"]), min_active_months=1)


@pytest.mark.parametrize(
    "row,line",
    [("p1,x,1500,1900,loss", 2), ("p1,1,abc,1900,loss", 2), ("p1,1,1500,1900,maybe", 2), ("p1,1,1500,inf,loss", 2), ("p1,1,1500", 2)],
)
def test_malformed_rows_report_line(row, line):
    with pytest.raises(IngestError) as info:
        ingest_game_records(chess([row]), min_active_months=1)
    assert info.value.line == line


def test_missing_header_column():
    with pytest.raises(IngestError):
        ingest_game_records(io.StringIO("player_id,month_index\np1,1\n"), min_active_months=1)


def test_draws_are_rejected_and_counted():
    rows = ["p1,1,1500,1900,loss", "p1,2,1500,1900,draw", "p1,3,1510,1400,win"]
    result = ingest_game_records(chess(rows), min_active_months=2)
    assert [line for line, _ in result.rejected] == [3]
    assert [r.outcome for r in result.panel.responses("p1")] == [0, 1]
    assert [r.iteration for r in result.panel.responses("p1")] == [1, 2]


def test_eligibility_filter_and_truncation():
    rows = [f"a,{m},1500,1500,win" for m in range(1, 6)] + [f"b,{m},1600,1500,loss" for m in range(1, 4)]
    result = ingest_game_records(chess(rows), min_active_months=4)
    assert result.panel.ids == ("a",)
    assert result.dropped_players == ("b",)
    assert result.panel.n_iterations == 4
    assert ingest_game_records(chess(rows), min_active_months=4, max_iterations=2).panel.n_iterations == 2


def test_bundled_fixture(chess_fixture):
    lines = chess_fixture.read_text().splitlines()
    draws = sum(1 for line in lines[1:] if line.endswith(",draw"))
    result = ingest_game_records(chess_fixture)
    assert len(result.rejected) == draws > 0
    assert result.panel.n_respondents == 20 and result.panel.n_iterations == 50
    assert result.panel.is_balanced
    assert set(result.dropped_players) == {"SHORT1", "SHORT2"}
    assert np.all(np.isfinite(result.truth))


def test_full_size_shape():
    rows = []
    rng = np.random.default_rng(0)
    for p in range(919):
        for m in range(1, 51):
            rows.append(f"p{p},{m},{1500 + rng.integers(-300, 300)},{1500 + rng.integers(-300, 300)},{'win' if rng.random() < 0.5 else 'loss'}")
    result = ingest_game_records(chess(rows))
    assert (result.panel.n_respondents, result.panel.n_iterations) == (919, 50)


def test_ingestion_is_lossless(chess_fixture):
    result = ingest_game_records(chess_fixture)
    text = panel_to_text(result.panel)
    back = read_generic_panel(io.StringIO(text))
    assert back == result.panel
    np.testing.assert_array_equal(back.difficulty, result.panel.difficulty)
    assert panel_to_text(back) == text
    truth = read_truth(io.StringIO(truth_to_text(result.panel, result.truth)), back)
    np.testing.assert_array_equal(truth, result.truth)
    expected = np.array([[rating_to_theta(1840)]])
    assert result.truth[0, 0] == expected[0, 0]


def test_generic_format_with_components():
    text = "respondent_id,iteration,difficulty_theta,outcome,components\na,1,0.5,1,x;y\na,2,-0.25,0,y\n"
    panel = read_generic_panel(io.StringIO(text))
    assert panel.components[0] == (("x", "y"), ("y",))
    assert panel_to_text(panel) == text


@pytest.mark.parametrize(
    "body",
    ["a,1,0.5,2\n", "a,1,nan,1\n", "a,2,0.5,1\n", "a,1,0.5,1\na,1,0.5,0\n"],
)
def test_generic_format_errors(body):
    with pytest.raises(IngestError):
        read_generic_panel(io.StringIO("respondent_id,iteration,difficulty_theta,outcome\n" + body))


def test_truth_for_unknown_respondent():
    panel = read_generic_panel(io.StringIO("respondent_id,iteration,difficulty_theta,outcome\na,1,0,1\n"))
    with pytest.raises(IngestError):
        read_truth(io.StringIO("respondent_id,iteration,theta_true\nzz,1,0.0\n"), panel)


# --- scenarios and splits ----------------------------------------------------


@pytest.fixture(scope="module")
def synth50():
    return generate_synthetic(60, 50, "logistic", seed=2)


def test_every_other_month_halves(synth50):
    thinned, truth = thin(synth50.panel, "every_other_month", synth50.true_theta)
    assert thinned.n_iterations == 25
    np.testing.assert_array_equal(thinned.outcome, synth50.panel.outcome[:, ::2])
    np.testing.assert_array_equal(truth, synth50.true_theta[:, ::2])
    same, _ = thin(synth50.panel, "every_month")
    assert same is synth50.panel


def test_odd_length_thinning():
    panel = generate_synthetic(3, 7, seed=1).panel
    assert thin(panel, "every_other_month")[0].n_iterations == 4


def test_split_sizes_and_determinism():
    ids = [f"p{j}" for j in range(919)]
    train, test = split_respondents(ids, 0.30, seed=7)
    assert (len(train), len(test)) == (644, 275)
    assert split_respondents(ids, 0.30, seed=7) == (train, test)
    assert sorted(train + test) == list(range(919))
    assert split_respondents(ids, 0.30, seed=8) != (train, test)


@given(st.integers(0, 2**31 - 1))
def test_split_within_band(seed):
    train, test = split_respondents([str(j) for j in range(919)], 0.30, seed)
    assert abs(len(train) - 644) <= 25 and abs(len(test) - 275) <= 25
    assert not set(train) & set(test)


def test_build_scenario(synth50):
    sc = build_scenario(synth50.panel, ScenarioSpec.scenario(2, split_seed=3), synth50.true_theta)
    assert sc.train.n_iterations == sc.test.n_iterations == 25
    assert sc.train.n_respondents + sc.test.n_respondents == 60
    assert not set(sc.train.ids) & set(sc.test.ids)
    rows = [synth50.panel.index_of(r) for r in sc.test.ids]
    np.testing.assert_array_equal(sc.test_truth, synth50.true_theta[rows][:, ::2])
    again = build_scenario(synth50.panel, ScenarioSpec.scenario(2, split_seed=3), synth50.true_theta)
    assert again.train == sc.train and again.test == sc.test


@pytest.mark.parametrize("kwargs", [{"thinning": "weekly"}, {"split_fraction_test": 0.0}, {"split_fraction_test": 1.0}])
def test_scenario_spec_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        ScenarioSpec(**kwargs)
    with pytest.raises(InvalidArgumentError):
        ScenarioSpec.scenario(3)


# --- generator ---------------------------------------------------------------


def test_matched_success_rate():
    synth = generate_synthetic(2000, 50, "logistic", seed=0)
    assert 0.495 <= synth.panel.outcome.mean() <= 0.505


def test_zero_spread_shares_curve():
    synth = generate_synthetic(30, 10, "piecewise", ability_sd=0.0, seed=4)
    g = growth_curve("piecewise", 10)
    np.testing.assert_array_equal(synth.true_theta, np.tile(g, (30, 1)))


def test_linear_mean_bound():
    synth = generate_synthetic(600, 50, "linear", ability_sd=0.5, seed=6, growth_params={"slope": 0.04})
    assert abs(synth.true_theta[:, 49].mean() - 2.0) <= 3 * 0.5 / math.sqrt(600)


def test_generator_determinism():
    a = generate_synthetic(40, 12, "logistic", item_policy="jittered", seed=21)
    b = generate_synthetic(40, 12, "logistic", item_policy="jittered", seed=21)
    assert panel_to_text(a.panel) == panel_to_text(b.panel)
    np.testing.assert_array_equal(a.true_theta, b.true_theta)
    c = generate_synthetic(40, 12, "logistic", item_policy="jittered", seed=22)
    assert panel_to_text(c.panel) != panel_to_text(a.panel)


def test_fixed_pool_policy():
    pool = [-1.0, 0.0, 2.5]
    synth = generate_synthetic(50, 6, item_policy="fixed_pool", item_pool=pool, seed=1)
    assert set(np.unique(synth.panel.difficulty)) <= set(pool)


def test_spread_grows_with_slope():
    synth = generate_synthetic(4000, 20, "linear", ability_sd=0.5, spread_slope=0.05, seed=3)
    sd = synth.true_theta.std(axis=0)
    assert sd[0] == pytest.approx(0.5, rel=0.05) and sd[-1] == pytest.approx(0.5 + 0.05 * 19, rel=0.05)


@pytest.mark.parametrize(
    "kwargs",
    [{"growth": "cubic"}, {"item_policy": "random"}, {"ability_sd": -1.0}, {"item_policy": "fixed_pool"}, {"n_respondents": 0}],
)
def test_generator_validation(kwargs):
    base = {"n_respondents": 5, "n_iterations": 4}
    with pytest.raises(InvalidArgumentError):
        generate_synthetic(**{**base, **kwargs})


def test_synthetic_panel_shape_check():
    from ability_trace.data import SyntheticPanel

    with pytest.raises(InvalidArgumentError):
        SyntheticPanel(ResponsePanel(["a"], np.zeros((1, 2)), np.zeros((1, 2), dtype=int)), np.zeros((1, 3)))
