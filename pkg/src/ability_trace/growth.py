"""Elo-informed growth model.

Respondents at the same iteration are treated as one group whose
abilities are normal with mean ``mu_t`` and spread ``sigma_t``. Elo
traces only rank respondents inside each group; the rank, turned into a
normal quantile, places a respondent on the fitted distribution:
``theta_hat = mu_t + sigma_t * Phi^-1(P)``.

Fitting ``(mu_t, sigma_t)`` maximises a log-likelihood over all
iterations in which iteration ``tau`` contributes with weight
``exp(-(tau - t)^2 / (2 * weight_sd^2))``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from ability_trace.core import (
    AbilityEstimate,
    ConvergenceError,
    InvalidArgumentError,
    Response,
    ResponsePanel,
    log1pexp,
    logistic,
    worker_count,
)
from ability_trace.elo import EloConfig, common_theta_mle, elo_matrix, elo_trace, fit_start_theta

SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0
MU_BOUNDS = (-20.0, 20.0)
DEFAULT_WEIGHT_SD = 2.0
DEFAULT_K_RANK = 0.4
DEFAULT_K_RANK_THINNED = 0.6
SIMPLEX_XATOL = 1e-6
# Edge of the starting simplex on both axes; scipy's default is a 5% relative nudge, which
# collapses when log(sigma) starts near zero.
SIMPLEX_STEP = 0.1
MAX_EVALUATIONS = 2000
# Iterations whose kernel weight falls below this are left out of the sum.
WEIGHT_CUTOFF = 1e-12
FORMAT_VERSION = 1

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _lower_quantile(p: np.ndarray) -> np.ndarray:
    """Quantile for ``0 < p <= 0.5``: rational start plus one Newton step."""
    z = np.empty_like(p)
    tail = p < _P_LOW
    if tail.any():
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        z[tail] = num / den
    mid = ~tail
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        z[mid] = num / den
    density = np.exp(-0.5 * z * z) / _SQRT_2PI
    return z - (ndtr(z) - p) / density


def normal_quantile(p) -> np.ndarray:
    """Vectorised standard normal quantile for probabilities strictly inside (0, 1)."""
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0) & (p < 1)):
        raise InvalidArgumentError("probabilities must lie strictly between 0 and 1")
    flat = p.ravel()
    out = np.empty_like(flat)
    upper = flat > 0.5
    out[~upper] = _lower_quantile(flat[~upper])
    # 1 - p is exact for p >= 0.5, so the upper half reuses the lower tail.
    out[upper] = -_lower_quantile(1.0 - flat[upper])
    return out.reshape(p.shape)


def inverse_normal_cdf(p: float) -> float:
    """z such that ``Phi(z) = p``; ``p`` must lie strictly inside (0, 1)."""
    p = float(p)
    if not (0.0 < p < 1.0):
        raise InvalidArgumentError(f"p must lie strictly between 0 and 1, got {p!r}")
    return float(normal_quantile(np.array([p]))[0])


def rank_proportion(cohort: Sequence[float], value: float) -> float:
    """Continuity-corrected share of a sorted cohort lying below ``value``.

    Ties count half, and ``(below + ties / 2 + 1/2) / (n + 1)`` keeps the
    result strictly inside (0, 1).
    """
    cohort = np.asarray(cohort, dtype=float)
    n = cohort.size
    if n == 0:
        raise InvalidArgumentError("cohort must contain at least one estimate")
    below = np.searchsorted(cohort, value, side="left")
    ties = np.searchsorted(cohort, value, side="right") - below
    return float((below + 0.5 * ties + 0.5) / (n + 1))


def _leave_one_out_proportions(values: np.ndarray) -> np.ndarray:
    """Rank proportion of each value against all the others in its column."""
    n, width = values.shape
    out = np.empty_like(values)
    for t in range(width):
        col = values[:, t]
        s = np.sort(col)
        below = np.searchsorted(s, col, side="left")
        ties = np.searchsorted(s, col, side="right") - below - 1
        out[:, t] = (below + 0.5 * ties + 0.5) / n
    return out


def weight_vector(t: int, n_iterations: int, weight_sd: float) -> np.ndarray:
    """Gaussian kernel weights over iterations ``1..n_iterations``, peaking at ``t``."""
    if not 1 <= t <= n_iterations:
        raise InvalidArgumentError(f"t must lie in 1..{n_iterations}, got {t}")
    if not weight_sd > 0:
        raise InvalidArgumentError(f"weight_sd must be positive, got {weight_sd!r}")
    tau = np.arange(1, n_iterations + 1, dtype=float)
    if math.isinf(weight_sd):
        return np.ones(n_iterations)
    return np.exp(-((tau - t) ** 2) / (2.0 * weight_sd**2))


@dataclass(frozen=True)
class IterationFit:
    mu: float
    sigma: float
    n_evaluations: int


class _WeightedRaschObjective:
    """Weighted log-likelihood of ``mu + sigma * z`` against observed outcomes."""

    def __init__(self, z, d, y, w):
        self.z, self.d, self.y, self.w = z, d, y, w

    def loglik(self, mu: float, sigma: float) -> float:
        eta = mu + sigma * self.z - self.d
        return float(np.sum(self.w * (self.y * eta - log1pexp(eta))))

    def grad_hess(self, mu: float, sigma: float):
        eta = mu + sigma * self.z - self.d
        p = logistic(eta)
        r = self.w * (self.y - p)
        v = self.w * p * (1.0 - p)
        g = np.array([r.sum(), (r * self.z).sum()])
        h = -np.array(
            [[v.sum(), (v * self.z).sum()], [(v * self.z).sum(), (v * self.z * self.z).sum()]]
        )
        return g, h


def _polish_mu(obj: _WeightedRaschObjective, mu: float, sigma: float) -> float:
    for _ in range(50):
        g, h = obj.grad_hess(mu, sigma)
        if h[0, 0] == 0:
            break
        step = -g[0] / h[0, 0]
        mu = float(np.clip(mu + step, *MU_BOUNDS))
        if abs(step) < 1e-12:
            break
    return mu


def _polish(obj: _WeightedRaschObjective, mu: float, sigma: float):
    """Newton refinement of the (concave) objective from the simplex optimum."""
    f = obj.loglik(mu, sigma)
    for _ in range(30):
        g, h = obj.grad_hess(mu, sigma)
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        scale = 1.0
        while scale > 1e-6:
            m_new, s_new = mu + scale * step[0], sigma + scale * step[1]
            if SIGMA_MIN <= s_new <= SIGMA_MAX:
                f_new = obj.loglik(m_new, s_new)
                if f_new >= f:
                    break
            scale *= 0.5
        else:
            break
        done = np.max(np.abs(scale * step)) < 1e-13
        mu, sigma, f = m_new, s_new, f_new
        if done:
            break
    return mu, sigma


def _nelder_mead(obj: _WeightedRaschObjective, init):
    # Converged once the simplex diameter is below xatol; the objective spread is not checked.
    s_lo, s_hi = math.log(SIGMA_MIN), math.log(SIGMA_MAX)
    x0 = np.array([np.clip(init[0], *MU_BOUNDS), np.clip(math.log(max(init[1], SIGMA_MIN)), s_lo, s_hi)])
    hi = np.array([MU_BOUNDS[1], s_hi])
    step = np.where(x0 + SIMPLEX_STEP > hi, -SIMPLEX_STEP, SIMPLEX_STEP)
    simplex = np.vstack([x0, x0 + [step[0], 0.0], x0 + [0.0, step[1]]])
    res = minimize(
        lambda x: -obj.loglik(x[0], math.exp(x[1])),
        x0,
        method="Nelder-Mead",
        bounds=[MU_BOUNDS, (s_lo, s_hi)],
        options={
            "initial_simplex": simplex,
            "xatol": SIMPLEX_XATOL,
            "fatol": math.inf,
            "maxfev": MAX_EVALUATIONS,
            "maxiter": MAX_EVALUATIONS,
        },
    )
    return res


def fit_iteration(
    panel: ResponsePanel,
    proportions: np.ndarray,
    t: int,
    weight_sd: float = DEFAULT_WEIGHT_SD,
    init: tuple[float, float] | None = None,
    weights: np.ndarray | None = None,
) -> IterationFit:
    """Fit ``(mu_t, sigma_t)`` for one iteration by weighted maximum likelihood.

    Args:
        panel: Balanced training panel.
        proportions: ``n x T`` rank proportions, strictly inside (0, 1).
        t: 1-based iteration to fit.
        weight_sd: Spread of the Gaussian iteration kernel.
        init: Starting ``(mu, sigma)``; defaults to ``(0, 1)``.
        weights: Explicit per-iteration weights overriding the kernel.

    Returns:
        The fitted mean and spread, with ``sigma`` clamped to
        ``[SIGMA_MIN, SIGMA_MAX]``.

    Raises:
        ConvergenceError: The simplex search ran out of evaluations; the
            best point so far is attached.
    """
    panel.require_balanced()
    proportions = np.asarray(proportions, dtype=float)
    if proportions.shape != panel.difficulty.shape:
        raise InvalidArgumentError("proportions must match the panel's shape")
    if not np.all((proportions > 0) & (proportions < 1)):
        raise InvalidArgumentError("rank proportions must lie strictly inside (0, 1)")
    n_it = panel.n_iterations
    w = weight_vector(t, n_it, weight_sd) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n_it,) or np.any(w < 0) or not np.any(w > 0):
        raise InvalidArgumentError("weights must be non-negative with at least one positive entry")
    keep = w > WEIGHT_CUTOFF * w.max()
    z = normal_quantile(proportions[:, keep])
    d = panel.difficulty[:, keep]
    y = panel.outcome[:, keep].astype(float)
    ww = np.broadcast_to(w[keep], z.shape)
    obj = _WeightedRaschObjective(z, d, y, ww)

    if np.all(z == 0):
        # Every rank sits at the median: sigma drops out of the likelihood.
        mu = common_theta_mle(d, y, ww)
        return IterationFit(mu, SIGMA_MIN, 0)

    init = (0.0, 1.0) if init is None else init
    res = _nelder_mead(obj, init)
    mu, sigma = float(res.x[0]), float(math.exp(res.x[1]))
    if not res.success:
        raise ConvergenceError(
            f"simplex search for iteration {t} did not converge: {res.message}",
            best=(mu, sigma),
            n_evaluations=int(res.nfev),
        )
    if sigma <= SIGMA_MIN * (1 + 1e-6) or sigma >= SIGMA_MAX * (1 - 1e-6):
        sigma = SIGMA_MIN if sigma < 1 else SIGMA_MAX
        mu = _polish_mu(obj, mu, sigma)
    else:
        mu, sigma = _polish(obj, mu, sigma)
    return IterationFit(float(mu), float(sigma), int(res.nfev))


@dataclass(frozen=True)
class GrowthModel:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    k_rank: float
    weight_sd: float
    start_theta: float
    cohorts: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.mu) == len(self.sigma) == len(self.cohorts)):
            raise InvalidArgumentError("need one (mu, sigma, cohort) per iteration")
        if any(s < SIGMA_MIN for s in self.sigma):
            raise InvalidArgumentError(f"sigma must be >= {SIGMA_MIN}")
        for c in self.cohorts:
            if c.size == 0 or np.any(np.diff(c) < 0):
                raise InvalidArgumentError("cohorts must be non-empty and sorted ascending")
            c.setflags(write=False)

    @property
    def n_iterations(self) -> int:
        return len(self.mu)

    @property
    def elo_config(self) -> EloConfig:
        return EloConfig.constant(self.k_rank, self.start_theta)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "model": "growth",
            "k_rank": self.k_rank,
            "weight_sd": self.weight_sd,
            "start_theta": self.start_theta,
            "iterations": [
                {"t": t + 1, "mu": self.mu[t], "sigma": self.sigma[t], "cohort": self.cohorts[t].tolist()}
                for t in range(self.n_iterations)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> GrowthModel:
        if doc.get("version") != FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported growth model version {doc.get('version')!r}")
        its = sorted(doc["iterations"], key=lambda it: it["t"])
        if [it["t"] for it in its] != list(range(1, len(its) + 1)):
            raise InvalidArgumentError("iterations must be numbered 1..n")
        return cls(
            mu=tuple(float(it["mu"]) for it in its),
            sigma=tuple(float(it["sigma"]) for it in its),
            k_rank=float(doc["k_rank"]),
            weight_sd=float(doc["weight_sd"]),
            start_theta=float(doc["start_theta"]),
            cohorts=tuple(np.asarray(it["cohort"], dtype=float) for it in its),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> GrowthModel:
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, GrowthModel):
            return NotImplemented
        return (
            self.mu == other.mu
            and self.sigma == other.sigma
            and (self.k_rank, self.weight_sd, self.start_theta) == (other.k_rank, other.weight_sd, other.start_theta)
            and all(np.array_equal(a, b) for a, b in zip(self.cohorts, other.cohorts))
        )


RANK_SOURCES = ("pre_update", "post_update")


def fitting_ranks(traces: np.ndarray, start_theta: float, rank_on: str = "pre_update") -> np.ndarray:
    """Values ranked when explaining the response at each iteration.

    ``pre_update`` ranks the Elo estimate held just before the response
    (the common start at iteration 1), so an outcome never feeds its own
    rank. ``post_update`` ranks the estimate after the response.
    """
    if rank_on == "post_update":
        return traces
    if rank_on != "pre_update":
        raise InvalidArgumentError(f"rank_on must be one of {RANK_SOURCES}, got {rank_on!r}")
    pre = np.empty_like(traces)
    pre[:, 0] = start_theta
    pre[:, 1:] = traces[:, :-1]
    return pre


def fit_growth_model(
    panel: ResponsePanel,
    k_rank: float = DEFAULT_K_RANK,
    weight_sd: float = DEFAULT_WEIGHT_SD,
    rank_on: str = "pre_update",
) -> GrowthModel:
    """Fit per-iteration ability distributions to a balanced training panel.

    The iteration-1 common ability seeds every respondent's Elo trace.
    Each response is explained by its respondent's rank among the others
    at the same iteration (see :func:`fitting_ranks`), and each
    ``(mu_t, sigma_t)`` is then fitted with :func:`fit_iteration`. The
    stored cohorts are the post-update traces, which is what a new
    respondent's estimate is ranked against.
    """
    panel.require_balanced()
    if panel.n_respondents < 2:
        raise InvalidArgumentError("need at least two training respondents")
    start = fit_start_theta(panel)
    config = EloConfig.constant(k_rank, start)
    traces = elo_matrix(panel, config)
    proportions = _leave_one_out_proportions(fitting_ranks(traces, start, rank_on))

    def fit_one(t):
        col = traces[:, t - 1]
        init = (float(col.mean()), float(col.std()))
        try:
            return fit_iteration(panel, proportions, t, weight_sd, init=init)
        except ConvergenceError as exc:
            raise ConvergenceError(f"iteration {t}: {exc}", exc.best, exc.n_evaluations) from exc

    its = range(1, panel.n_iterations + 1)
    workers = min(worker_count(), panel.n_iterations)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fits = list(pool.map(fit_one, its))
    else:
        fits = [fit_one(t) for t in its]
    return GrowthModel(
        mu=tuple(f.mu for f in fits),
        sigma=tuple(f.sigma for f in fits),
        k_rank=float(k_rank),
        weight_sd=float(weight_sd),
        start_theta=float(start),
        cohorts=tuple(np.sort(traces[:, t]) for t in range(panel.n_iterations)),
    )


def in_sample_estimates(model: GrowthModel, panel: ResponsePanel) -> np.ndarray:
    """Abilities of the training respondents themselves, ranked leave-one-out."""
    traces = elo_matrix(panel, model.elo_config)
    z = normal_quantile(_leave_one_out_proportions(traces))
    return np.asarray(model.mu)[None, :] + np.asarray(model.sigma)[None, :] * z


def place_trace(model: GrowthModel, trace: Sequence[float]) -> list[float]:
    """Map Elo trace values at iterations 1..t onto the fitted ability scale."""
    if len(trace) > model.n_iterations:
        raise IndexError(
            f"responses reach iteration {len(trace)} but the model only covers 1..{model.n_iterations}"
        )
    out = []
    for tau, value in enumerate(trace):
        p = rank_proportion(model.cohorts[tau], value)
        out.append(model.mu[tau] + model.sigma[tau] * inverse_normal_cdf(p))
    return out


def estimate_new_respondent(model: GrowthModel, responses: Sequence[Response]) -> list[AbilityEstimate]:
    """Ability estimates at iterations ``1..t`` for a respondent outside the training set."""
    trace = elo_trace(responses, model.elo_config)
    values = place_trace(model, trace.estimates)
    return [AbilityEstimate(r.respondent_id, r.iteration, v) for r, v in zip(responses, values)]


def estimate_panel(model: GrowthModel, panel: ResponsePanel) -> np.ndarray:
    """Vectorised :func:`estimate_new_respondent` over a (possibly ragged) panel."""
    if panel.n_iterations > model.n_iterations:
        raise IndexError(
            f"panel reaches iteration {panel.n_iterations} but the model only covers 1..{model.n_iterations}"
        )
    traces = elo_matrix(panel, model.elo_config)
    out = np.full(traces.shape, np.nan)
    for t in range(traces.shape[1]):
        live = panel.mask[:, t]
        cohort = model.cohorts[t]
        v = traces[live, t]
        below = np.searchsorted(cohort, v, side="left")
        ties = np.searchsorted(cohort, v, side="right") - below
        p = (below + 0.5 * ties + 0.5) / (cohort.size + 1)
        out[live, t] = model.mu[t] + model.sigma[t] * normal_quantile(p)
    return out
