"""Synthetic experiment designs shared by the scripts and the acceptance suite."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from ability_trace.data import ScenarioSpec, SyntheticPanel, build_scenario, generate_synthetic, split_respondents
from ability_trace.elo import DEFAULT_K_GRID
from ability_trace.evaluation import (
    BenchmarkConfig,
    SizeRow,
    SweepResult,
    estimate_methods,
    rmse_per_iteration,
    sweep_k,
    training_size_study,
)


@dataclass(frozen=True)
class SyntheticDesign:
    n_respondents: int
    n_iterations: int
    growth: str = "logistic"
    growth_params: dict = field(default_factory=dict)
    ability_sd: float = 0.5
    item_policy: str = "matched"
    spread_slope: float = 0.0

    def generate(self, seed: int) -> SyntheticPanel:
        return generate_synthetic(
            self.n_respondents,
            self.n_iterations,
            growth=self.growth,
            ability_sd=self.ability_sd,
            item_policy=self.item_policy,
            seed=seed,
            growth_params=dict(self.growth_params),
            spread_slope=self.spread_slope,
        )

    def with_(self, **changes) -> SyntheticDesign:
        return replace(self, **changes)


# Per-iteration normal abilities around a logistic mean curve.
SELF_CONSISTENCY = SyntheticDesign(600, 50, "logistic", {"amplitude": 2.0, "rate": 0.2}, ability_sd=0.5)
# Wide ability spread with a one-and-a-half logit surge mid-panel; 919 respondents as in the chess data.
SCENARIO_CONTRAST = SyntheticDesign(919, 50, "logistic", {"amplitude": 1.5, "rate": 0.2}, ability_sd=2.0)
# Random-intercept model with a linear mean, beta_t = 0.05 t, sigma2 = 1.
GLMM_RECOVERY = SyntheticDesign(600, 20, "linear", {"intercept": 0.0, "slope": 0.05}, ability_sd=1.0, item_policy="jittered")
TRAINING_SIZE = SyntheticDesign(900, 50, "logistic", {"amplitude": 3.0, "rate": 0.2}, ability_sd=0.5)


@dataclass(frozen=True)
class ScenarioRun:
    scenario: int
    seed: int
    elo_sweep: SweepResult
    growth_sweep: SweepResult
    test_rmse: dict[str, float]

    @property
    def gap(self) -> float:
        return self.test_rmse["growth"] - self.test_rmse["elo"]


def scenario_run(
    design: SyntheticDesign,
    scenario: int,
    seed: int,
    grid: Sequence[float] = DEFAULT_K_GRID,
    weight_sd: float = 2.0,
) -> ScenarioRun:
    """Sweep K on training data for both methods, then score each at its best K on the test split."""
    synth = design.generate(seed)
    sc = build_scenario(synth.panel, ScenarioSpec.scenario(scenario, split_seed=seed), synth.true_theta)
    elo = sweep_k(sc.train, sc.train_truth, grid, "elo", weight_sd)
    growth = sweep_k(sc.train, sc.train_truth, grid, "growth", weight_sd)
    config = BenchmarkConfig(k_elo=elo.best_k_rmse, k_growth=growth.best_k_rmse, weight_sd=weight_sd, timing_repeats=1)
    est, _, failures = estimate_methods(sc.train, sc.test, ("growth", "elo"), config)
    if failures:
        raise RuntimeError(f"scenario {scenario} seed {seed}: {failures}")
    rmse = {m: float(np.nanmean(rmse_per_iteration(e, sc.test_truth))) for m, e in est.items()}
    return ScenarioRun(scenario, seed, elo, growth, rmse)


def training_size_run(
    design: SyntheticDesign,
    seed: int,
    sizes: Sequence[int] = (50, 100, 200, 400, 600),
    methods: Sequence[str] = ("growth", "elo", "glmm_fixed", "glmm_ml"),
    test_fraction: float = 1 / 3,
    config: BenchmarkConfig = BenchmarkConfig(timing_repeats=1),
) -> list[SizeRow]:
    synth = design.generate(seed)
    train_rows, test_rows = split_respondents(synth.panel.ids, test_fraction, seed)
    panel, truth = synth.panel, synth.true_theta
    return training_size_study(
        panel.subset(train_rows), panel.subset(test_rows), truth[test_rows], sizes, methods, seed, config
    )
