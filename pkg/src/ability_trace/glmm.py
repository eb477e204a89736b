"""Random-intercept logistic mixed model with iteration as a factor.

``logit P(y_jt = 1) = beta_t + u_j - d_jt`` with ``u_j ~ Normal(0, sigma2)``.
The per-respondent integral over ``u_j`` is approximated by adaptive
Gauss-Hermite quadrature centred at the respondent's posterior mode;
``nodes=1`` is the Laplace approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import logsumexp

from ability_trace.core import ConvergenceError, InvalidArgumentError, ResponsePanel, log1pexp, logistic
from ability_trace.elo import common_theta_mle

DEFAULT_NODES = 9
BETA_BOUNDS = (-30.0, 30.0)
LOG_SIGMA2_BOUNDS = (math.log(1e-8), math.log(100.0))
GRADIENT_TOL = 1e-5
MODE_TOL = 1e-12
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GlmmModel:
    beta: tuple[float, ...]
    sigma2: float
    nodes: int = DEFAULT_NODES
    loglik: float = field(default=math.nan, compare=False)
    n_iterations_run: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise InvalidArgumentError(f"sigma2 must be positive, got {self.sigma2!r}")
        if not all(math.isfinite(b) for b in self.beta):
            raise InvalidArgumentError("beta must be finite")
        if self.nodes < 1:
            raise InvalidArgumentError("nodes must be >= 1")

    @property
    def n_iterations(self) -> int:
        return len(self.beta)

    def to_dict(self) -> dict:
        return {"version": FORMAT_VERSION, "model": "glmm", "beta": list(self.beta), "sigma2": self.sigma2, "nodes": self.nodes}

    @classmethod
    def from_dict(cls, doc: dict) -> GlmmModel:
        if doc.get("version") != FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported glmm model version {doc.get('version')!r}")
        return cls(tuple(float(b) for b in doc["beta"]), float(doc["sigma2"]), int(doc["nodes"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> GlmmModel:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RandomEffect:
    respondent_id: str
    u: float


class _Data:
    """Padded response matrices with an observation mask."""

    def __init__(self, panel: ResponsePanel, n_iterations: int | None = None):
        width = panel.difficulty.shape[1] if n_iterations is None else n_iterations
        if panel.difficulty.shape[1] > width:
            raise InvalidArgumentError(f"responses reach iteration {panel.difficulty.shape[1]} beyond the model's {width}")
        pad = width - panel.difficulty.shape[1]
        m = np.pad(panel.mask, ((0, 0), (0, pad))).astype(float)
        self.m = m
        self.d = np.where(m > 0, np.pad(np.nan_to_num(panel.difficulty), ((0, 0), (0, pad))), 0.0)
        self.y = np.pad(panel.outcome.astype(float), ((0, 0), (0, pad)))

    @classmethod
    def stack(cls, a: _Data, b: _Data) -> _Data:
        out = cls.__new__(cls)
        out.m, out.d, out.y = (np.vstack([getattr(a, k), getattr(b, k)]) for k in ("m", "d", "y"))
        return out


def _modes(beta, sigma2, data: _Data, u0=None, max_iter: int = 200):
    """Posterior mode of every ``u_j`` by safeguarded Newton steps (the objective is strictly concave)."""
    eta0 = beta[None, :] - data.d
    u = np.zeros(data.m.shape[0]) if u0 is None else u0.copy()
    for _ in range(max_iter):
        p = logistic(eta0 + u[:, None])
        g = np.sum(data.m * (data.y - p), axis=1) - u / sigma2
        h = -np.sum(data.m * p * (1.0 - p), axis=1) - 1.0 / sigma2
        step = np.clip(-g / h, -2.0, 2.0)
        u = u + step
        if np.max(np.abs(step), initial=0.0) < MODE_TOL:
            break
    return u


def _agq(beta, sigma2, data: _Data, nodes: int, u0=None, gradient: bool = False):
    """Per-respondent adaptive quadrature log-integrals, optionally with exact gradients.

    The gradient accounts for the movement of the quadrature nodes with the
    parameters, so it is the derivative of the approximation itself.
    """
    x, w = hermgauss(nodes)
    m_u = _modes(beta, sigma2, data, u0)
    eta0 = beta[None, :] - data.d
    p_m = logistic(eta0 + m_u[:, None])
    v_m = data.m * p_m * (1.0 - p_m)
    h = -v_m.sum(axis=1) - 1.0 / sigma2
    s = 1.0 / np.sqrt(-h)
    r2 = math.sqrt(2.0)
    uk = m_u[:, None] + r2 * s[:, None] * x[None, :]  # (n, K)
    eta = eta0[:, None, :] + uk[:, :, None]  # (n, K, T)
    ll_obs = np.sum(data.m[:, None, :] * (data.y[:, None, :] * eta - log1pexp(eta)), axis=2)
    log_f = ll_obs - uk**2 / (2.0 * sigma2) - 0.5 * math.log(2.0 * math.pi * sigma2)
    terms = np.log(w)[None, :] + x[None, :] ** 2 + log_f
    per = np.log(r2 * s) + logsumexp(terms, axis=1)
    if not gradient:
        return per, m_u
    pi = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))  # (n, K)
    pk = logistic(eta)
    resid = data.m[:, None, :] * (data.y[:, None, :] - pk)  # d log_f / d beta_t at each node
    fprime = resid.sum(axis=2) - uk / sigma2  # d log_f / d u at each node
    # Implicit derivatives of the mode m and the scale s (through h) w.r.t. beta_t.
    dv_du = data.m * p_m * (1.0 - p_m) * (1.0 - 2.0 * p_m)  # (n, T)
    dm_db = v_m / h[:, None]  # -(dg/dbeta_t) / (dg/dm) with dg/dbeta_t = -v_t
    dh_dm = -dv_du.sum(axis=1)
    dh_db_total = -dv_du + dh_dm[:, None] * dm_db
    ds_db = 0.5 * s[:, None] ** 3 * dh_db_total
    shift_b = dm_db[:, None, :] + r2 * x[None, :, None] * ds_db[:, None, :]  # (n, K, T)
    grad_beta = ds_db / s[:, None] + np.einsum("nk,nkt->nt", pi, resid + fprime[:, :, None] * shift_b)
    # Same for log sigma2: dg/dls = m/sigma2, dh/dls = 1/sigma2.
    dm_dls = -(m_u / sigma2) / h
    dh_dls_total = 1.0 / sigma2 + dh_dm * dm_dls
    ds_dls = 0.5 * s**3 * dh_dls_total
    df_dls = uk**2 / (2.0 * sigma2) - 0.5
    shift_ls = dm_dls[:, None] + r2 * x[None, :] * ds_dls[:, None]
    grad_ls = ds_dls / s + np.sum(pi * (df_dls + fprime * shift_ls), axis=1)
    return per, m_u, grad_beta, grad_ls


def _check_nodes(nodes: int) -> int:
    if int(nodes) != nodes or nodes < 1:
        raise InvalidArgumentError(f"nodes must be a positive integer, got {nodes!r}")
    return int(nodes)


def glmm_marginal_loglik(beta, sigma2: float, panel: ResponsePanel, nodes: int = DEFAULT_NODES) -> float:
    """Marginal log-likelihood of the panel, integrating each ``u_j`` numerically."""
    if not sigma2 > 0:
        raise InvalidArgumentError(f"sigma2 must be positive, got {sigma2!r}")
    nodes = _check_nodes(nodes)
    beta = np.asarray(beta, dtype=float)
    data = _Data(panel, len(beta))
    per, _ = _agq(beta, float(sigma2), data, nodes)
    return float(per.sum())


def glmm_loglik_gradient(beta, sigma2: float, panel: ResponsePanel, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Gradient of :func:`glmm_marginal_loglik` w.r.t. ``(beta..., log sigma2)``."""
    beta = np.asarray(beta, dtype=float)
    data = _Data(panel, len(beta))
    _, _, gb, gls = _agq(beta, float(sigma2), data, _check_nodes(nodes), gradient=True)
    return np.append(gb.sum(axis=0), gls.sum())


def _initial_beta(data: _Data) -> np.ndarray:
    beta = np.zeros(data.m.shape[1])
    for t in range(data.m.shape[1]):
        live = data.m[:, t] > 0
        if live.any():
            y = data.y[live, t]
            if 0 < y.mean() < 1:
                beta[t] = common_theta_mle(data.d[live, t], y)
            else:
                beta[t] = float(np.mean(data.d[live, t]) + (2.0 if y[0] == 1 else -2.0))
    return beta


def _fit(data: _Data, nodes: int, beta0: np.ndarray, sigma2_0: float, max_iter: int = 2000) -> GlmmModel:
    n_it = data.m.shape[1]
    state = {"u": None}

    def objective(params):
        beta, ls = params[:n_it], params[n_it]
        per, m_u, gb, gls = _agq(beta, math.exp(ls), data, nodes, state["u"], gradient=True)
        state["u"] = m_u
        return -float(per.sum()), -np.append(gb.sum(axis=0), gls.sum())

    x0 = np.append(np.clip(beta0, *BETA_BOUNDS), np.clip(math.log(sigma2_0), *LOG_SIGMA2_BOUNDS))
    bounds = [BETA_BOUNDS] * n_it + [LOG_SIGMA2_BOUNDS]
    res = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": 0.0, "gtol": 1e-8, "maxcor": 20},
    )
    beta, ls = res.x[:n_it], res.x[n_it]
    grad = res.jac
    # Components pinned at a bound are not stationary; judge the free ones.
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    free = (res.x > lo + 1e-9) & (res.x < hi - 1e-9)
    gnorm = float(np.linalg.norm(grad[free])) if free.any() else 0.0
    if gnorm >= GRADIENT_TOL:
        raise ConvergenceError(
            f"GLMM fit stopped with gradient norm {gnorm:.3g} after {res.nit} iterations: {res.message}",
            best=GlmmModel(tuple(map(float, beta)), math.exp(ls), nodes, -float(res.fun), int(res.nit)),
            n_evaluations=int(res.nfev),
        )
    return GlmmModel(tuple(map(float, beta)), math.exp(ls), nodes, -float(res.fun), int(res.nit))


def fit_glmm(panel: ResponsePanel, nodes: int = DEFAULT_NODES, init: GlmmModel | None = None) -> GlmmModel:
    """Maximum marginal likelihood fit of ``(beta, sigma2)``.

    Starts from per-iteration logistic fits with ``u = 0`` and
    ``sigma2 = 1`` unless ``init`` supplies a warm start.
    """
    nodes = _check_nodes(nodes)
    if panel.n_respondents < 2:
        raise InvalidArgumentError("need at least two respondents")
    data = _Data(panel)
    if init is None:
        beta0, s0 = _initial_beta(data), 1.0
    else:
        beta0, s0 = np.asarray(init.beta, dtype=float), init.sigma2
    return _fit(data, nodes, beta0, s0)


def glmm_predict_fixed(model: GlmmModel, t: int) -> float:
    """Cohort-mean ability at iteration ``t``; identical for every respondent."""
    if not 1 <= t <= model.n_iterations:
        raise IndexError(f"iteration {t} outside 1..{model.n_iterations}")
    return model.beta[t - 1]


def _check_range(model: GlmmModel, panel: ResponsePanel):
    if panel.n_iterations > model.n_iterations:
        raise IndexError(f"responses reach iteration {panel.n_iterations} beyond the model's {model.n_iterations}")


def estimate_random_effects(model: GlmmModel, panel: ResponsePanel) -> np.ndarray:
    """Conditional mode of ``u_j`` for every respondent, given the fitted model."""
    _check_range(model, panel)
    data = _Data(panel, model.n_iterations)
    return _modes(np.asarray(model.beta), model.sigma2, data)


def estimate_random_effect(model: GlmmModel, responses) -> RandomEffect:
    """Maximise ``sum_t loglik(beta_t + u - d_t) - u^2 / (2 sigma2)`` over ``u``."""
    responses = list(responses)
    if not responses:
        raise InvalidArgumentError("need at least one response")
    panel = ResponsePanel.from_responses(responses)
    return RandomEffect(responses[0].respondent_id, float(estimate_random_effects(model, panel)[0]))


def prefix_abilities_ml(model: GlmmModel, panel: ResponsePanel) -> np.ndarray:
    """``beta_t + u_j`` where ``u_j`` is re-estimated from responses ``1..t`` only."""
    _check_range(model, panel)
    n, width = panel.difficulty.shape
    out = np.full((n, width), np.nan)
    beta = np.asarray(model.beta)
    for t in range(1, width + 1):
        live = panel.mask[:, t - 1]
        if not live.any():
            break
        u = estimate_random_effects(model, panel.prefix(t).subset(np.flatnonzero(live)))
        out[live, t - 1] = beta[t - 1] + u
    return out


class GlmmRefitter:
    """Re-fit the whole model with one new respondent's responses added.

    Training matrices are built once and each refit warm-starts from the
    training fit.
    """

    def __init__(self, model: GlmmModel, train: ResponsePanel):
        self.model = model
        self.train = _Data(train, model.n_iterations)

    def refit(self, responses_panel: ResponsePanel) -> GlmmModel:
        extra = _Data(responses_panel, self.model.n_iterations)
        data = _Data.stack(self.train, extra)
        return _fit(data, self.model.nodes, np.asarray(self.model.beta), self.model.sigma2)

    def abilities(self, panel: ResponsePanel, row: int) -> np.ndarray:
        """Refit-based ability of respondent ``row`` at each of its iterations."""
        single = panel.subset([row])
        out = np.full(panel.difficulty.shape[1], np.nan)
        for t in range(1, int(single.lengths[0]) + 1):
            prefix = single.prefix(t)
            refit = self.refit(prefix)
            u = estimate_random_effects(refit, prefix)[0]
            out[t - 1] = refit.beta[t - 1] + u
        return out
