"""Tracking time-varying abilities from sequences of binary item responses."""

from ability_trace.core import (
    AbilityEstimate,
    ConvergenceError,
    InvalidArgumentError,
    Response,
    ResponsePanel,
    rasch_probability,
    rating_to_theta,
    theta_to_rating,
)
from ability_trace.elo import ConstantK, DecayingK, EloConfig, EloTrace, PerOutcomeK, elo_trace, elo_update
from ability_trace.growth import GrowthModel, estimate_new_respondent, fit_growth_model
from ability_trace.glmm import GlmmModel, estimate_random_effect, fit_glmm

__version__ = "0.1.0"

__all__ = [
    "AbilityEstimate",
    "ConstantK",
    "ConvergenceError",
    "DecayingK",
    "EloConfig",
    "EloTrace",
    "GlmmModel",
    "GrowthModel",
    "InvalidArgumentError",
    "PerOutcomeK",
    "Response",
    "ResponsePanel",
    "elo_trace",
    "elo_update",
    "estimate_new_respondent",
    "estimate_random_effect",
    "fit_glmm",
    "fit_growth_model",
    "rasch_probability",
    "rating_to_theta",
    "theta_to_rating",
]
