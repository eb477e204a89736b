"""Elo tracking on the theta scale with pluggable step-size policies."""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ability_trace.core import (
    InvalidArgumentError,
    Response,
    ResponsePanel,
    _require_finite,
    log1pexp,
    logistic,
    rasch_probability,
)

START_BRACKET = (-10.0, 10.0)
GOLDEN_TOL = 1e-8
DEFAULT_K_GRID = tuple(round(0.1 * i, 1) for i in range(1, 16))


class SeparationWarning(UserWarning):
    """The data cannot pin down a finite maximum-likelihood estimate."""


def _check_k(k: float, name: str = "k") -> float:
    k = float(k)
    if not (k > 0 and math.isfinite(k)):
        raise InvalidArgumentError(f"{name} must be a positive finite number, got {k!r}")
    return k


@dataclass(frozen=True)
class ConstantK:
    k: float = 0.4

    def __post_init__(self):
        _check_k(self.k)

    def step(self, iteration: int, outcome: int) -> float:
        return self.k

    def steps(self, outcomes: np.ndarray) -> np.ndarray:
        return np.full(outcomes.shape, self.k)


@dataclass(frozen=True)
class PerOutcomeK:
    """Separate step sizes after correct and incorrect responses."""

    k_correct: float
    k_incorrect: float

    def __post_init__(self):
        _check_k(self.k_correct, "k_correct")
        _check_k(self.k_incorrect, "k_incorrect")

    def step(self, iteration: int, outcome: int) -> float:
        return self.k_correct if outcome == 1 else self.k_incorrect

    def steps(self, outcomes: np.ndarray) -> np.ndarray:
        return np.where(outcomes == 1, self.k_correct, self.k_incorrect)


@dataclass(frozen=True)
class DecayingK:
    """``K_t = k0 / (1 + decay * (t - 1))``, where ``t - 1`` previous answers were seen."""

    k0: float
    decay: float = 0.0

    def __post_init__(self):
        _check_k(self.k0, "k0")
        if not (self.decay >= 0 and math.isfinite(self.decay)):
            raise InvalidArgumentError(f"decay must be >= 0, got {self.decay!r}")

    def step(self, iteration: int, outcome: int) -> float:
        return self.k0 / (1.0 + self.decay * (iteration - 1))

    def steps(self, outcomes: np.ndarray) -> np.ndarray:
        t = np.arange(1, outcomes.shape[-1] + 1)
        return np.broadcast_to(self.k0 / (1.0 + self.decay * (t - 1)), outcomes.shape)


StepPolicy = ConstantK | PerOutcomeK | DecayingK


@dataclass(frozen=True)
class EloConfig:
    policy: StepPolicy = field(default_factory=ConstantK)
    start_theta: float = 0.0

    def __post_init__(self):
        _require_finite("start_theta", self.start_theta)

    @classmethod
    def constant(cls, k: float, start_theta: float = 0.0) -> EloConfig:
        return cls(ConstantK(k), start_theta)


@dataclass(frozen=True)
class EloTrace:
    respondent_id: str
    estimates: tuple[float, ...]


def elo_update(theta: float, d: float, y: int, k: float) -> float:
    """One Elo step: ``theta + k * (y - p(theta, d))``."""
    _check_k(k)
    if y not in (0, 1):
        raise InvalidArgumentError(f"y must be 0 or 1, got {y!r}")
    return theta + k * (y - rasch_probability(theta, d))


def elo_trace(responses: Sequence[Response], config: EloConfig) -> EloTrace:
    """Post-update Elo estimate after each response, in order."""
    theta = config.start_theta
    estimates = []
    rid = responses[0].respondent_id if responses else ""
    for r in responses:
        theta = elo_update(theta, r.difficulty, r.outcome, config.policy.step(r.iteration, r.outcome))
        estimates.append(theta)
    return EloTrace(rid, tuple(estimates))


def elo_matrix(panel: ResponsePanel, config: EloConfig) -> np.ndarray:
    """Elo traces for every respondent of a panel as an ``n x T`` matrix.

    Entries past a respondent's last response are NaN. Respondents are
    updated in lock-step, which gives the same values as running
    :func:`elo_trace` on each sequence.
    """
    n, width = panel.difficulty.shape
    out = np.full((n, width), np.nan)
    theta = np.full(n, float(config.start_theta))
    steps = config.policy.steps(panel.outcome)
    for t in range(width):
        live = panel.mask[:, t]
        if not live.any():
            break
        p = logistic(theta[live] - panel.difficulty[live, t])
        theta[live] = theta[live] + steps[live, t] * (panel.outcome[live, t] - p)
        out[live, t] = theta[live]
    return out


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def common_theta_mle(difficulty: np.ndarray, outcome: np.ndarray, weights: np.ndarray | None = None) -> float:
    """ML estimate of one ability shared by all responses, bracketed to [-10, 10].

    Separable data (all outcomes equal) returns the bracket bound with a
    :class:`SeparationWarning`.
    """
    d = np.asarray(difficulty, dtype=float).ravel()
    y = np.asarray(outcome, dtype=float).ravel()
    w = np.ones_like(d) if weights is None else np.asarray(weights, dtype=float).ravel()
    if d.size == 0:
        raise InvalidArgumentError("need at least one response")
    lo, hi = START_BRACKET
    live = w > 0
    if np.all(y[live] == 1) or np.all(y[live] == 0):
        bound = hi if y[live][0] == 1 else lo
        warnings.warn(
            f"all outcomes are {int(y[live][0])}; the likelihood is monotone, returning bracket bound {bound}",
            SeparationWarning,
            stacklevel=2,
        )
        return bound

    def loglik(theta):
        eta = theta - d
        return float(np.sum(w * (y * eta - log1pexp(eta))))

    return _golden_max(loglik, lo, hi, GOLDEN_TOL)


def fit_start_theta(panel: ResponsePanel) -> float:
    """Common starting ability fitted to the iteration-1 responses."""
    if panel.n_respondents == 0 or not panel.mask[:, 0].any():
        raise InvalidArgumentError("panel has no responses at iteration 1")
    first = panel.mask[:, 0]
    return common_theta_mle(panel.difficulty[first, 0], panel.outcome[first, 0])
