"""Reference estimators: additive and performance factor models, and knowledge tracing.

These are fitted and unit-tested but are not part of the default
benchmark, since they either ignore item difficulty or describe mastery
rather than ability.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ability_trace.core import ConvergenceError, InvalidArgumentError, ResponsePanel, logistic

RIDGE = 1e-8
GRADIENT_TOL = 1e-6
MAX_IRLS_ITERATIONS = 100
# A coefficient this large means the likelihood keeps improving as it diverges.
SEPARATION_BOUND = 25.0
SATURATED_LOGIT = 12.0
BKT_GRID_STEP = 0.05
BKT_EPS = 1e-6


class SeparationError(InvalidArgumentError):
    """The outcomes are perfectly predicted by a feature, so its ML estimate is infinite."""

    def __init__(self, message: str, feature: str):
        super().__init__(message)
        self.feature = feature


class DegenerateDataWarning(UserWarning):
    """The data cannot identify the parameters; boundary values are returned."""


# --- logits ---------------------------------------------------------------


@dataclass(frozen=True)
class LfaModel:
    """Per-respondent intercepts, practice slopes and component difficulties.

    With ``known_difficulty`` the item difficulty is an offset and every
    ``beta`` is zero.
    """

    alpha: Mapping[str, float]
    components: tuple[str, ...]
    gamma: tuple[float, ...]
    beta: tuple[float, ...]
    known_difficulty: bool = False

    def __post_init__(self):
        _check_lengths(self.components, gamma=self.gamma, beta=self.beta)
        if not all(math.isfinite(v) for v in (*self.alpha.values(), *self.gamma, *self.beta)):
            raise InvalidArgumentError("LFA parameters must be finite")


@dataclass(frozen=True)
class PfaModel:
    components: tuple[str, ...]
    gamma: tuple[float, ...]
    rho: tuple[float, ...]
    beta: tuple[float, ...]
    known_difficulty: bool = False

    def __post_init__(self):
        _check_lengths(self.components, gamma=self.gamma, rho=self.rho, beta=self.beta)
        if not all(math.isfinite(v) for v in (*self.gamma, *self.rho, *self.beta)):
            raise InvalidArgumentError("PFA parameters must be finite")


def _check_lengths(components, **params):
    if len(set(components)) != len(components):
        raise InvalidArgumentError("component ids must be unique")
    for name, values in params.items():
        if len(values) != len(components):
            raise InvalidArgumentError(f"need one {name} per component")


def _component_index(components: Sequence[str], omega: Sequence[str]) -> list[int]:
    lookup = {c: i for i, c in enumerate(components)}
    try:
        return [lookup[c] for c in omega]
    except KeyError as exc:
        raise InvalidArgumentError(f"unknown component {exc.args[0]!r}") from None


def _check_counts(counts: Mapping[str, float], omega):
    for c in omega:
        if counts.get(c, 0) < 0:
            raise InvalidArgumentError(f"count for component {c!r} must be >= 0")


def lfa_logit(
    model: LfaModel,
    respondent_id: str,
    counts: Mapping[str, float],
    omega: Sequence[str],
    difficulty: float = 0.0,
) -> float:
    """``alpha_j + sum_{c in omega} (gamma_c * m_c - beta_c) - difficulty``."""
    idx = _component_index(model.components, omega)
    _check_counts(counts, omega)
    if respondent_id not in model.alpha:
        raise InvalidArgumentError(f"unknown respondent {respondent_id!r}")
    total = model.alpha[respondent_id]
    for c, i in zip(omega, idx):
        total += model.gamma[i] * counts.get(c, 0) - model.beta[i]
    return float(total - difficulty)


def pfa_logit(
    model: PfaModel,
    successes: Mapping[str, float],
    failures: Mapping[str, float],
    omega: Sequence[str],
    difficulty: float = 0.0,
) -> float:
    """``sum_{c in omega} (gamma_c * s_c + rho_c * f_c - beta_c) - difficulty``."""
    idx = _component_index(model.components, omega)
    _check_counts(successes, omega)
    _check_counts(failures, omega)
    total = 0.0
    for c, i in zip(omega, idx):
        total += model.gamma[i] * successes.get(c, 0) + model.rho[i] * failures.get(c, 0) - model.beta[i]
    return float(total - difficulty)


# --- logistic regression --------------------------------------------------


@dataclass(frozen=True)
class IrlsResult:
    coef: np.ndarray
    deviances: tuple[float, ...]
    gradient_norm: float


def _deviance(eta, y):
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def irls(X: np.ndarray, y: np.ndarray, offset: np.ndarray | None = None, names: Sequence[str] | None = None) -> IrlsResult:
    """Ridge-stabilised Newton iterations for logistic regression with step halving.

    Raises:
        SeparationError: a coefficient diverges; the error names its feature.
        ConvergenceError: the gradient norm did not fall below ``GRADIENT_TOL``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n == 0:
        raise InvalidArgumentError("no responses to fit")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    names = list(names) if names is not None else [f"x{i}" for i in range(k)]
    beta = np.zeros(k)
    dev = _deviance(off, y)
    devs = [dev]
    gnorm = math.inf
    for _ in range(MAX_IRLS_ITERATIONS):
        eta = X @ beta + off
        p = logistic(eta)
        grad = X.T @ (y - p) - RIDGE * beta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < GRADIENT_TOL:
            break
        w = p * (1.0 - p)
        H = (X * w[:, None]).T @ X + RIDGE * np.eye(k)
        step = np.linalg.solve(H, grad)
        scale = 1.0
        while True:
            cand = beta + scale * step
            new_dev = _deviance(X @ cand + off, y)
            if new_dev <= dev or scale < 1e-10:
                break
            scale *= 0.5
        beta = cand
        big = np.abs(beta) > SEPARATION_BOUND
        if big.any():
            feature = names[int(np.argmax(np.abs(beta)))]
            raise SeparationError(f"outcomes are separable along feature {feature!r}", feature)
        dev = min(dev, new_dev)
        devs.append(new_dev)
    else:
        _check_separation(X, beta, off, names)
        raise ConvergenceError(
            f"IRLS stopped after {MAX_IRLS_ITERATIONS} iterations with gradient norm {gnorm:.3g}",
            best=beta,
            n_evaluations=MAX_IRLS_ITERATIONS,
        )
    _check_separation(X, beta, off, names)
    return IrlsResult(beta, tuple(devs), gnorm)


def _check_separation(X, beta, off, names):
    # Under separation the gradient vanishes numerically once fitted
    # probabilities saturate, so a small gradient alone does not prove a finite optimum.
    eta = X @ beta + off
    if np.max(np.abs(eta)) > SATURATED_LOGIT:
        contrib = np.abs(beta) * np.max(np.abs(X), axis=0)
        feature = names[int(np.argmax(contrib))]
        raise SeparationError(f"outcomes are separable along feature {feature!r}", feature)


def _component_rows(panel: ResponsePanel):
    """Yield ``(row, t, omega, prior successes, prior failures)`` for each response."""
    if panel.components is None:
        raise InvalidArgumentError("panel has no component annotations")
    for j in range(panel.n_respondents):
        succ: dict[str, int] = {}
        fail: dict[str, int] = {}
        for t in range(int(panel.lengths[j])):
            omega = panel.components[j][t]
            if not omega:
                raise InvalidArgumentError(f"response {panel.ids[j]}@{t + 1} has no components")
            yield j, t, omega, dict(succ), dict(fail)
            bucket = succ if panel.outcome[j, t] == 1 else fail
            for c in omega:
                bucket[c] = bucket.get(c, 0) + 1


def _components_of(panel: ResponsePanel) -> tuple[str, ...]:
    if panel.components is None:
        raise InvalidArgumentError("panel has no component annotations")
    return tuple(sorted({c for row in panel.components for omega in row for c in omega}))


def fit_pfa(panel: ResponsePanel, known_difficulty: bool = True) -> PfaModel:
    """Maximum-likelihood PFA fit.

    With ``known_difficulty`` the observed item difficulty is an offset and
    only ``gamma`` and ``rho`` are estimated; otherwise each component also
    gets a difficulty ``beta_c``.
    """
    if panel.n_respondents == 0:
        raise InvalidArgumentError("empty panel")
    comps = _components_of(panel)
    n_c = len(comps)
    col = {c: i for i, c in enumerate(comps)}
    rows, y, off = [], [], []
    for j, t, omega, succ, fail in _component_rows(panel):
        x = np.zeros(3 * n_c)
        for c in omega:
            i = col[c]
            x[i] = succ.get(c, 0)
            x[n_c + i] = fail.get(c, 0)
            x[2 * n_c + i] = -1.0
        rows.append(x)
        y.append(panel.outcome[j, t])
        off.append(-panel.difficulty[j, t] if known_difficulty else 0.0)
    X = np.array(rows)
    names = [f"gamma[{c}]" for c in comps] + [f"rho[{c}]" for c in comps] + [f"beta[{c}]" for c in comps]
    if known_difficulty:
        X, names = X[:, : 2 * n_c], names[: 2 * n_c]
    coef = irls(X, np.array(y), np.array(off), names).coef
    beta = (0.0,) * n_c if known_difficulty else tuple(map(float, coef[2 * n_c :]))
    return PfaModel(comps, tuple(map(float, coef[:n_c])), tuple(map(float, coef[n_c : 2 * n_c])), beta, known_difficulty)


def fit_lfa(panel: ResponsePanel, known_difficulty: bool = True) -> LfaModel:
    """Maximum-likelihood LFA fit with one intercept per respondent.

    Without known difficulties the first component's ``beta`` is fixed at
    zero, since a shift in all ``beta`` is absorbed by the intercepts.
    """
    if panel.n_respondents == 0:
        raise InvalidArgumentError("empty panel")
    comps = _components_of(panel)
    n_c, n_r = len(comps), panel.n_respondents
    col = {c: i for i, c in enumerate(comps)}
    rows, y, off = [], [], []
    for j, t, omega, succ, fail in _component_rows(panel):
        x = np.zeros(n_r + 2 * n_c)
        x[j] = 1.0
        for c in omega:
            i = col[c]
            x[n_r + i] = succ.get(c, 0) + fail.get(c, 0)
            x[n_r + n_c + i] = -1.0
        rows.append(x)
        y.append(panel.outcome[j, t])
        off.append(-panel.difficulty[j, t] if known_difficulty else 0.0)
    X = np.array(rows)
    names = [f"alpha[{r}]" for r in panel.ids] + [f"gamma[{c}]" for c in comps] + [f"beta[{c}]" for c in comps]
    keep = list(range(n_r + n_c)) if known_difficulty else list(range(n_r + n_c)) + list(range(n_r + n_c + 1, n_r + 2 * n_c))
    coef = irls(X[:, keep], np.array(y), np.array(off), [names[i] for i in keep]).coef
    full = np.zeros(n_r + 2 * n_c)
    full[keep] = coef
    return LfaModel(
        dict(zip(panel.ids, map(float, full[:n_r]))),
        comps,
        tuple(map(float, full[n_r : n_r + n_c])),
        tuple(map(float, full[n_r + n_c :])),
        known_difficulty,
    )


# --- knowledge tracing ----------------------------------------------------


@dataclass(frozen=True)
class BktParams:
    p_l0: float
    p_slip: float
    p_guess: float
    p_transit: float

    def __post_init__(self):
        for name in ("p_l0", "p_slip", "p_guess", "p_transit"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidArgumentError(f"{name} must lie strictly inside (0, 1), got {v!r}")
        if not (self.p_slip < 0.5 and self.p_guess < 0.5):
            raise InvalidArgumentError("slip and guess must both be below 0.5")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_l0, self.p_slip, self.p_guess, self.p_transit])


def bkt_update(params: BktParams, p_prev: float, outcome: int) -> float:
    """Posterior mastery after one observed outcome, followed by the learning step."""
    if not 0.0 <= p_prev <= 1.0:
        raise InvalidArgumentError(f"p_prev must lie in [0, 1], got {p_prev!r}")
    if outcome not in (0, 1):
        raise InvalidArgumentError(f"outcome must be 0 or 1, got {outcome!r}")
    s, g, tr = params.p_slip, params.p_guess, params.p_transit
    if outcome == 1:
        num, den = p_prev * (1.0 - s), p_prev * (1.0 - s) + (1.0 - p_prev) * g
    else:
        num, den = p_prev * s, p_prev * s + (1.0 - p_prev) * (1.0 - g)
    post = num / den if den > 0 else p_prev
    return float(min(1.0, max(0.0, post + (1.0 - post) * tr)))


def _bkt_backward(sgt: np.ndarray, y: np.ndarray, mask: np.ndarray):
    """Backward probabilities of every sequence from the mastered and unmastered start.

    Returns ``(b_mastered, b_unmastered, log_scale)``, each ``m x n``, so that
    a sequence's likelihood under initial mastery ``L0`` is
    ``(L0 * b_mastered + (1 - L0) * b_unmastered) * exp(log_scale)``.
    """
    s, g, tr = sgt[:, 0:1], sgt[:, 1:2], sgt[:, 2:3]
    shape = (sgt.shape[0], y.shape[0])
    b_m, b_u = np.ones(shape), np.ones(shape)
    log_scale = np.zeros(shape)
    for t in range(y.shape[1] - 1, -1, -1):
        correct = y[:, t] == 1
        live = mask[:, t]
        # Transition after the response at t, then the emission at t.
        next_u = tr * b_m + (1.0 - tr) * b_u
        e_m = np.where(correct, 1.0 - s, s)
        e_u = np.where(correct, g, 1.0 - g)
        new_m, new_u = e_m * b_m, e_u * next_u
        b_m = np.where(live, new_m, b_m)
        b_u = np.where(live, new_u, b_u)
        if t % 16 == 0:
            top = np.maximum(b_m, b_u)
            b_m, b_u = b_m / top, b_u / top
            log_scale += np.log(top)
    return b_m, b_u, log_scale


def _bkt_loglik(theta: np.ndarray, y: np.ndarray, mask: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Marginal log-likelihood for each parameter row of ``theta`` (``m x 4``)."""
    b_m, b_u, log_scale = _bkt_backward(theta[:, 1:], y, mask)
    l0 = theta[:, 0:1]
    return (np.log(l0 * b_m + (1.0 - l0) * b_u) + log_scale) @ counts


def bkt_loglik(params: BktParams, panel: ResponsePanel) -> float:
    y, mask, counts = _unique_sequences(panel)
    return float(_bkt_loglik(params.as_array()[None, :], y, mask, counts)[0])


def _unique_sequences(panel: ResponsePanel):
    coded = np.where(panel.mask, panel.outcome, -1)
    uniq, counts = np.unique(coded, axis=0, return_counts=True)
    return np.where(uniq < 0, 0, uniq), uniq >= 0, counts.astype(float)


def _grid_axes():
    full = np.round(np.arange(BKT_GRID_STEP, 1.0 - BKT_GRID_STEP / 2, BKT_GRID_STEP), 10)
    return full, full[full < 0.5]


def _grid_search(y, mask, counts, chunk: int) -> tuple[np.ndarray, float]:
    full, half = _grid_axes()
    sgt = np.array(list(itertools.product(half, half, full)))
    best, best_x = -math.inf, None
    for i in range(0, len(sgt), chunk):
        b_m, b_u, log_scale = _bkt_backward(sgt[i : i + chunk], y, mask)
        for l0 in full:
            scores = (np.log(l0 * b_m + (1.0 - l0) * b_u) + log_scale) @ counts
            k = int(np.argmax(scores))
            if scores[k] > best:
                best, best_x = float(scores[k]), np.array([l0, *sgt[i + k]])
    return best_x, best


def fit_bkt(panel: ResponsePanel, chunk: int = 512) -> BktParams:
    """Maximum marginal likelihood by a 0.05 grid, refined with a bounded simplex search."""
    if panel.n_respondents == 0:
        raise InvalidArgumentError("need at least one response sequence")
    observed = panel.outcome[panel.mask]
    if observed.size == 0:
        raise InvalidArgumentError("need at least one response")
    y, mask, counts = _unique_sequences(panel)
    start, start_ll = _grid_search(y, mask, counts, chunk)
    bounds = [(BKT_EPS, 1 - BKT_EPS), (BKT_EPS, 0.5 - BKT_EPS), (BKT_EPS, 0.5 - BKT_EPS), (BKT_EPS, 1 - BKT_EPS)]
    res = minimize(
        lambda x: -_bkt_loglik(x[None, :], y, mask, counts)[0],
        start,
        method="Nelder-Mead",
        bounds=bounds,
        options={"xatol": 1e-7, "fatol": 1e-10, "maxfev": 4000},
    )
    x = res.x if -res.fun >= start_ll else start
    if np.all(observed == observed[0]):
        warnings.warn(
            f"every outcome is {int(observed[0])}; the parameters sit on the boundary of the search box",
            DegenerateDataWarning,
            stacklevel=2,
        )
    return BktParams(*map(float, x))


def bkt_mastery(params: BktParams, panel: ResponsePanel) -> np.ndarray:
    """Mastery probability after each response; NaN past a respondent's last one."""
    out = np.full(panel.difficulty.shape, np.nan)
    for j in range(panel.n_respondents):
        l = params.p_l0
        for t in range(int(panel.lengths[j])):
            l = bkt_update(params, l, int(panel.outcome[j, t]))
            out[j, t] = l
    return out


def simulate_bkt(params: BktParams, n_sequences: int, length: int, seed: int = 0) -> ResponsePanel:
    """Outcome sequences drawn from the knowledge-tracing model; difficulty is set to 0."""
    rng = np.random.default_rng(seed)
    mastered = rng.random(n_sequences) < params.p_l0
    y = np.empty((n_sequences, length), dtype=int)
    for t in range(length):
        pc = np.where(mastered, 1.0 - params.p_slip, params.p_guess)
        y[:, t] = rng.random(n_sequences) < pc
        mastered |= rng.random(n_sequences) < params.p_transit
    ids = [f"s{j:0{len(str(n_sequences))}d}" for j in range(n_sequences)]
    return ResponsePanel(ids, np.zeros((n_sequences, length)), y)


def simulate_pfa(
    model: PfaModel,
    n_respondents: int,
    length: int,
    seed: int = 0,
    difficulty_sd: float = 0.0,
) -> ResponsePanel:
    """Responses where each item exercises one component drawn uniformly at random.

    ``difficulty_sd > 0`` adds known item difficulties, which the outcomes
    then depend on through the logit offset.
    """
    rng = np.random.default_rng(seed)
    n_c = len(model.components)
    d = rng.normal(0.0, difficulty_sd, (n_respondents, length)) if difficulty_sd > 0 else np.zeros((n_respondents, length))
    comp = rng.integers(0, n_c, (n_respondents, length))
    succ = np.zeros((n_respondents, n_c))
    fail = np.zeros((n_respondents, n_c))
    y = np.empty((n_respondents, length), dtype=int)
    rows = np.arange(n_respondents)
    gamma, rho, beta = (np.asarray(v) for v in (model.gamma, model.rho, model.beta))
    for t in range(length):
        c = comp[:, t]
        eta = gamma[c] * succ[rows, c] + rho[c] * fail[rows, c] - beta[c] - d[:, t]
        y[:, t] = rng.random(n_respondents) < logistic(eta)
        succ[rows, c] += y[:, t]
        fail[rows, c] += 1 - y[:, t]
    ids = [f"p{j:0{len(str(n_respondents))}d}" for j in range(n_respondents)]
    components = [[(model.components[k],) for k in comp[j]] for j in range(n_respondents)]
    return ResponsePanel(ids, d, y, components=components)
