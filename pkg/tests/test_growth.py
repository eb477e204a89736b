import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ability_trace.core import InvalidArgumentError, Response, ResponsePanel
from ability_trace.data import generate_synthetic
from ability_trace.elo import elo_matrix, elo_trace, fit_start_theta
from ability_trace.growth import (
    SIGMA_MAX,
    SIGMA_MIN,
    GrowthModel,
    _leave_one_out_proportions,
    estimate_new_respondent,
    estimate_panel,
    fit_growth_model,
    fit_iteration,
    fitting_ranks,
    inverse_normal_cdf,
    normal_quantile,
    place_trace,
    rank_proportion,
    weight_vector,
)

mpmath.mp.dps = 40


def mp_phi(z):
    return mpmath.ncdf(mpmath.mpf(z))


def mp_quantile(p):
    p = mpmath.mpf(p)
    return mpmath.findroot(lambda z: mpmath.ncdf(z) - p, mpmath.sqrt(2) * mpmath.erfinv(2 * p - 1))


# --- inverse normal cdf ------------------------------------------------------


def test_quantile_examples():
    assert inverse_normal_cdf(0.5) == 0.0
    assert inverse_normal_cdf(0.8413447) == pytest.approx(1.0, abs=1e-5)
    assert inverse_normal_cdf(0.975) == pytest.approx(1.959964, abs=1e-5)


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.3, 0.5, 0.7, 0.97575, 0.999, 1 - 1e-9])
def test_quantile_against_high_precision(p):
    assert inverse_normal_cdf(p) == pytest.approx(float(mp_quantile(p)), abs=1e-9, rel=1e-12)


def test_quantile_round_trip_grid():
    grid = np.round(np.arange(1, 1000) / 1000, 3)
    z = normal_quantile(grid)
    err = max(abs(float(mp_phi(zi)) - p) for zi, p in zip(z, grid))
    assert err < 1e-8


@given(st.floats(1e-10, 1 - 1e-10))
def test_quantile_round_trip_property(p):
    assert float(mp_phi(inverse_normal_cdf(p))) == pytest.approx(p, abs=1e-9)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_quantile_rejects_outside_unit_interval(p):
    with pytest.raises(InvalidArgumentError):
        inverse_normal_cdf(p)


# --- rank proportion ---------------------------------------------------------


def counting_oracle(cohort, value):
    below = sum(c < value for c in cohort)
    ties = sum(c == value for c in cohort)
    return (below + 0.5 * ties + 0.5) / (len(cohort) + 1)


def test_rank_proportion_examples():
    assert rank_proportion([0.1, 0.5, 0.5, 0.9], 0.5) == 0.5
    assert rank_proportion([0.1, 0.5, 0.5, 0.9], 2.0) == pytest.approx(0.9, abs=1e-15)
    assert rank_proportion([0.0], 0.0) == 0.5


def test_rank_proportion_empty_cohort():
    with pytest.raises(InvalidArgumentError):
        rank_proportion([], 0.0)


@given(
    st.lists(st.sampled_from([-1e300, -1.0, 0.0, 0.0, 1.0, 1e300]) | st.floats(-5, 5), min_size=1, max_size=40),
    st.sampled_from([-1e300, -1.0, 0.0, 1.0, 1e300]) | st.floats(-5, 5),
)
def test_rank_proportion_strictly_inside_and_matches_counting(cohort, value):
    cohort = sorted(cohort)
    p = rank_proportion(cohort, value)
    assert 0 < p < 1
    assert p == pytest.approx(counting_oracle(cohort, value), abs=1e-15)
    assert math.isfinite(inverse_normal_cdf(p))


@given(st.lists(st.integers(-3, 3), min_size=2, max_size=30))
def test_leave_one_out_excludes_self(values):
    col = np.array(values, dtype=float)[:, None]
    got = _leave_one_out_proportions(col)[:, 0]
    for j, v in enumerate(values):
        others = sorted(values[:j] + values[j + 1 :])
        below = sum(o < v for o in others)
        ties = sum(o == v for o in others)
        assert got[j] == pytest.approx((below + 0.5 * ties + 0.5) / len(values), abs=1e-15)
        assert 0 < got[j] < 1


# --- weights -----------------------------------------------------------------


def test_weight_vector_examples():
    w = weight_vector(1, 3, 2.0)
    oracle = [float(mpmath.exp(-mpmath.mpf(k) ** 2 / 8)) for k in range(3)]
    np.testing.assert_allclose(w, oracle, rtol=0, atol=1e-15)
    np.testing.assert_allclose(w, [1.0, 0.8825, 0.6065], atol=5e-5)
    np.testing.assert_array_equal(weight_vector(2, 3, math.inf), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(weight_vector(2, 3, 1e8), [1.0, 1.0, 1.0], atol=1e-15)
    w = weight_vector(2, 3, 2.0)
    assert w[0] == w[2] and w[1] == 1.0


@pytest.mark.parametrize("t,n,sd", [(0, 3, 2.0), (4, 3, 2.0), (1, 3, 0.0), (1, 3, -1.0)])
def test_weight_vector_rejects(t, n, sd):
    with pytest.raises(InvalidArgumentError):
        weight_vector(t, n, sd)


# --- fitting -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic(120, 12, "logistic", ability_sd=0.8, seed=3, growth_params={"amplitude": 2.0})


@pytest.fixture(scope="module")
def small_ranks(small_synth):
    panel = small_synth.panel
    start = fit_start_theta(panel)
    from ability_trace.elo import EloConfig

    traces = elo_matrix(panel, EloConfig.constant(0.4, start))
    return _leave_one_out_proportions(fitting_ranks(traces, start))


def test_degenerate_median_ranks_give_start_theta(rng):
    d = rng.normal(size=(30, 1))
    y = (rng.random((30, 1)) < 0.5).astype(int)
    panel = ResponsePanel([f"p{j}" for j in range(30)], d, y)
    fit = fit_iteration(panel, np.full((30, 1), 0.5), 1)
    assert fit.sigma == SIGMA_MIN
    assert fit.mu == pytest.approx(fit_start_theta(panel), abs=1e-8)


@pytest.mark.parametrize("c", [2.0, 1e-3, 37.5])
def test_weight_scaling_invariance(small_synth, small_ranks, c):
    panel = small_synth.panel
    w = weight_vector(6, panel.n_iterations, 2.0)
    a = fit_iteration(panel, small_ranks, 6, weights=w)
    b = fit_iteration(panel, small_ranks, 6, weights=c * w)
    assert b.mu == pytest.approx(a.mu, abs=1e-6)
    assert b.sigma == pytest.approx(a.sigma, abs=1e-6)


def test_fit_iteration_is_weighted_argmax(small_synth, small_ranks):
    # Local grid around the optimum never beats the fitted point.
    panel = small_synth.panel
    fit = fit_iteration(panel, small_ranks, 5)
    w = weight_vector(5, panel.n_iterations, 2.0)
    z = normal_quantile(small_ranks)

    def ll(mu, sigma):
        eta = mu + sigma * z - panel.difficulty
        return float(np.sum(w * (panel.outcome * eta - np.logaddexp(0, eta))))

    best = ll(fit.mu, fit.sigma)
    for dm in np.linspace(-0.05, 0.05, 11):
        for ds in np.linspace(-0.05, 0.05, 11):
            assert ll(fit.mu + dm, fit.sigma + ds) <= best + 1e-9


def test_fit_iteration_input_checks(small_synth, small_ranks):
    panel = small_synth.panel
    bad = small_ranks.copy()
    bad[0, 0] = 1.0
    with pytest.raises(InvalidArgumentError):
        fit_iteration(panel, bad, 1)
    with pytest.raises(InvalidArgumentError):
        fit_iteration(panel, small_ranks[:, :3], 1)


def grid_mu(panel, z, sigma):
    grid = np.linspace(-2, 2, 40001)
    eta = grid[:, None] + sigma * z.ravel()[None, :] - panel.difficulty.ravel()[None, :]
    ll = np.sum(panel.outcome.ravel() * eta - np.logaddexp(0, eta), axis=1)
    return grid[np.argmax(ll)]


@pytest.mark.parametrize("rank_on", ["pre_update", "post_update"])
def test_two_respondent_symmetric_case(rank_on):
    panel = ResponsePanel(["a", "b"], np.zeros((2, 1)), np.array([[1], [0]]))
    model = fit_growth_model(panel, rank_on=rank_on)
    assert model.mu[0] == pytest.approx(0.0, abs=1e-3)
    assert model.sigma[0] in (SIGMA_MIN, SIGMA_MAX)
    traces = elo_matrix(panel, model.elo_config)
    z = normal_quantile(_leave_one_out_proportions(fitting_ranks(traces, model.start_theta, rank_on)))
    assert model.mu[0] == pytest.approx(grid_mu(panel, z, model.sigma[0]), abs=1e-3)


def test_flat_truth_gives_flat_curve():
    spreads = []
    for seed in range(8):
        synth = generate_synthetic(50, 20, "linear", ability_sd=0.5, seed=seed, growth_params={"slope": 0.0})
        model = fit_growth_model(synth.panel)
        spreads.append(max(model.mu) - min(model.mu))
    assert np.mean(spreads) < 0.3


def test_relabeling_ids_gives_identical_model(small_synth):
    panel = small_synth.panel
    relabeled = ResponsePanel([f"x{j}" for j in range(panel.n_respondents)], panel.difficulty, panel.outcome)
    assert fit_growth_model(relabeled) == fit_growth_model(panel)


def test_model_shape_and_cohorts(small_synth):
    model = fit_growth_model(small_synth.panel)
    assert model.n_iterations == 12
    assert all(s >= SIGMA_MIN for s in model.sigma)
    for c in model.cohorts:
        assert c.size == 120 and np.all(np.diff(c) >= 0)


def test_fit_rejects_bad_panels(small_synth):
    with pytest.raises(InvalidArgumentError):
        fit_growth_model(small_synth.panel.subset([0]))
    with pytest.raises(InvalidArgumentError):
        fit_growth_model(small_synth.panel, rank_on="sideways")
    two = small_synth.panel.subset([0, 1])
    ragged = ResponsePanel(two.ids, two.difficulty, two.outcome, lengths=[12, 5])
    with pytest.raises(InvalidArgumentError):
        fit_growth_model(ragged)


def test_serialization_round_trip(small_synth):
    model = fit_growth_model(small_synth.panel)
    doc = model.to_dict()
    assert set(doc) >= {"version", "k_rank", "weight_sd", "start_theta", "iterations"}
    back = GrowthModel.from_json(model.to_json())
    assert back == model
    assert back.mu == model.mu and back.sigma == model.sigma
    for a, b in zip(back.cohorts, model.cohorts):
        np.testing.assert_array_equal(a, b)


# --- estimation --------------------------------------------------------------


def toy_model(mu, sigma, cohorts, k=0.4, start=0.0):
    return GrowthModel(tuple(mu), tuple(sigma), k, 2.0, start, tuple(np.sort(np.asarray(c, float)) for c in cohorts))


def test_median_trace_maps_to_mu():
    responses = [Response("new", t, 0.3 * t, t % 2) for t in range(1, 4)]
    trace = elo_trace(responses, toy_model([0] * 3, [1] * 3, [[0]] * 3).elo_config).estimates
    cohorts = [[v - 1, v, v + 1] for v in trace]
    model = toy_model([0.4, 0.8, 1.2], [0.5, 0.6, 0.7], cohorts)
    est = estimate_new_respondent(model, responses)
    assert [e.theta_hat for e in est] == [0.4, 0.8, 1.2]
    assert [e.iteration for e in est] == [1, 2, 3]


def test_quantile_placement_example():
    n = 99999
    below = 84134  # (below + 1/2) / (n + 1) = 0.841345
    value = 0.0
    cohort = np.concatenate([value - 1 - np.arange(below), value + 1 + np.arange(n - below)])
    model = toy_model([0.0, 0.0, 1.2], [1.0, 1.0, 0.5], [[0.0], [0.0], cohort])
    assert rank_proportion(model.cohorts[2], value) == pytest.approx(0.8413447, abs=1e-6)
    assert place_trace(model, [0.0, 0.0, value])[2] == pytest.approx(1.7, abs=1e-4)


def test_placement_above_every_member():
    cohort = np.linspace(-2, 2, 643)
    model = toy_model([0.3], [0.8], [cohort])
    expected = 0.3 + 0.8 * float(mp_quantile(mpmath.mpf(643.5) / 644))
    assert place_trace(model, [10.0])[0] == pytest.approx(expected, abs=1e-9)


def test_estimate_beyond_model_range():
    model = toy_model([0.0, 0.0], [1.0, 1.0], [[0.0], [0.0]])
    responses = [Response("new", t, 0.0, 1) for t in range(1, 4)]
    with pytest.raises(IndexError):
        estimate_new_respondent(model, responses)


@given(
    st.lists(st.floats(-3, 3), min_size=1, max_size=30),
    st.floats(-4, 4),
    st.floats(-4, 4),
    st.floats(1e-3, 3),
)
def test_estimate_monotone_in_trace(cohort, a, b, sigma):
    assume(a < b)
    model = toy_model([0.2], [sigma], [cohort])
    lo, hi = place_trace(model, [a])[0], place_trace(model, [b])[0]
    assert lo <= hi
    c = np.sort(cohort)
    if np.any((c > a) & (c < b)) or np.any(c == a) or np.any(c == b):
        assert lo < hi


def test_estimate_panel_matches_per_respondent(small_synth):
    model = fit_growth_model(small_synth.panel.subset(range(80)))
    test = small_synth.panel.subset(range(80, 120))
    mat = estimate_panel(model, test)
    for j, (rid, responses) in enumerate(test.sequences()):
        got = [e.theta_hat for e in estimate_new_respondent(model, responses)]
        np.testing.assert_allclose(mat[j], got, rtol=0, atol=1e-12)
