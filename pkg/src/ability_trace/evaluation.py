"""Accuracy metrics, K sweeps, training-size studies and method benchmarks."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ability_trace.core import InvalidArgumentError, ResponsePanel, worker_count
from ability_trace.elo import DEFAULT_K_GRID, EloConfig, elo_matrix, fit_start_theta
from ability_trace.glmm import DEFAULT_NODES, GlmmRefitter, fit_glmm, prefix_abilities_ml
from ability_trace.growth import DEFAULT_WEIGHT_SD, estimate_panel, fit_growth_model, in_sample_estimates

log = logging.getLogger(__name__)

METHODS = ("growth", "elo", "glmm_fixed", "glmm_ml", "glmm_refit")
METHOD_LABELS = {
    "growth": "Elo-informed",
    "elo": "Elo",
    "glmm_fixed": "GLMM fixed effects",
    "glmm_refit": "GLMM refit",
    "glmm_ml": "GLMM ML",
}
TABLE_ORDER = ("growth", "elo", "glmm_fixed", "glmm_refit", "glmm_ml")


class DegenerateInputError(InvalidArgumentError):
    """A correlation was requested for a constant vector."""


def _aligned(estimates, truth):
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise InvalidArgumentError(f"estimates {est.shape} and truth {tru.shape} are not aligned")
    if est.ndim == 1:
        est, tru = est[:, None], tru[:, None]
    return est, tru


def rmse_per_iteration(estimates, truth) -> np.ndarray:
    """Root mean squared error across respondents for every iteration (column).

    Cells missing (NaN) in either input are skipped.
    """
    est, tru = _aligned(estimates, truth)
    sq = (est - tru) ** 2
    ok = np.isfinite(sq)
    counts = ok.sum(axis=0)
    sums = np.where(ok, sq, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(np.where(counts > 0, sums / np.maximum(counts, 1), np.nan))


def mean_bias_per_iteration(estimates, truth) -> np.ndarray:
    est, tru = _aligned(estimates, truth)
    diff = est - tru
    ok = np.isfinite(diff)
    counts = ok.sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, np.where(ok, diff, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan)


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    for i in range(1, x.size + 1):
        if i == x.size or sx[i] != sx[start]:
            ranks[order[start:i]] = 0.5 * (start + i - 1) + 1.0
            start = i
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with mid-rank ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgumentError("x and y must be 1-D vectors of equal length")
    if x.size < 2:
        raise InvalidArgumentError("need at least two observations")
    rx, ry = midranks(x), midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise DegenerateInputError("Spearman correlation is undefined for a constant vector")
    return float(np.clip(rx @ ry / denom, -1.0, 1.0))


def spearman_per_iteration(estimates, truth) -> np.ndarray:
    """Column-wise Spearman correlation; NaN where a column is degenerate."""
    est, tru = _aligned(estimates, truth)
    out = np.full(est.shape[1], np.nan)
    for t in range(est.shape[1]):
        ok = np.isfinite(est[:, t]) & np.isfinite(tru[:, t])
        try:
            out[t] = spearman(est[ok, t], tru[ok, t])
        except InvalidArgumentError:
            pass
    return out


# --- K sweep --------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    k: float
    mean_rmse: float
    mean_spearman: float


@dataclass(frozen=True)
class SweepResult:
    method: str
    rows: tuple[SweepRow, ...]

    @property
    def best_k_rmse(self) -> float:
        return min(self.rows, key=lambda r: r.mean_rmse).k

    @property
    def best_k_spearman(self) -> float:
        return max(self.rows, key=lambda r: r.mean_spearman).k

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["k", f"mean_rmse_{self.method}", "mean_spearman"])
        for r in self.rows:
            w.writerow([repr(r.k), repr(r.mean_rmse), repr(r.mean_spearman)])
        return out.getvalue()


def _sweep_one(train: ResponsePanel, truth: np.ndarray, k: float, method: str, weight_sd: float, start: float) -> SweepRow:
    elo = elo_matrix(train, EloConfig.constant(k, start))
    if method == "elo":
        est = elo
    else:
        est = in_sample_estimates(fit_growth_model(train, k, weight_sd), train)
    rho = spearman_per_iteration(elo, truth)
    return SweepRow(float(k), float(np.nanmean(rmse_per_iteration(est, truth))), float(np.nanmean(rho)))


def sweep_k(
    train: ResponsePanel,
    truth: np.ndarray,
    grid: Sequence[float] = DEFAULT_K_GRID,
    method: str = "elo",
    weight_sd: float = DEFAULT_WEIGHT_SD,
) -> SweepResult:
    """Mean training RMSE and mean Elo-vs-truth Spearman for every step size in ``grid``.

    The Spearman column always refers to the plain Elo trace, so it is the
    same for both methods.
    """
    if method not in ("elo", "growth"):
        raise InvalidArgumentError(f"method must be 'elo' or 'growth', got {method!r}")
    if not grid or any(not k > 0 for k in grid):
        raise InvalidArgumentError("grid must be non-empty with positive step sizes")
    start = fit_start_theta(train)

    def run(k):
        try:
            return _sweep_one(train, truth, k, method, weight_sd, start)
        except Exception as exc:
            raise type(exc)(f"K={k}: {exc}") from exc

    workers = min(worker_count(), len(grid))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, grid))
    else:
        rows = [run(k) for k in grid]
    return SweepResult(method, tuple(rows))


# --- benchmark ------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    k_elo: float = 0.8
    k_growth: float = 0.4
    weight_sd: float = DEFAULT_WEIGHT_SD
    nodes: int = DEFAULT_NODES
    timing_repeats: int = 3

    @classmethod
    def for_scenario(cls, scenario: int, **overrides) -> BenchmarkConfig:
        base = {1: dict(k_elo=0.8, k_growth=0.4), 2: dict(k_elo=1.3, k_growth=0.6)}
        if scenario not in base:
            raise InvalidArgumentError(f"scenario must be 1 or 2, got {scenario!r}")
        return cls(**{**base[scenario], **overrides})


@dataclass
class EvalReport:
    methods: tuple[str, ...]
    n_iterations: int
    per_iteration_rmse: dict[str, np.ndarray]
    mean_bias: dict[str, np.ndarray]
    spearman: np.ndarray
    timings: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def mean_rmse(self) -> dict[str, float]:
        return {m: float(np.nanmean(v)) for m, v in self.per_iteration_rmse.items()}

    def _ordered(self):
        return [m for m in TABLE_ORDER if m in self.methods] + [m for m in self.methods if m not in TABLE_ORDER]

    def rmse_table(self, digits: int | None = None) -> str:
        """Iteration-by-method RMSE table in the layout of the appendix tables."""
        cols = [m for m in self._ordered() if m in self.per_iteration_rmse]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iteration"] + [METHOD_LABELS.get(m, m) for m in cols])
        fmt = (lambda v: repr(float(v))) if digits is None else (lambda v: f"{v:.{digits}f}")
        for t in range(self.n_iterations):
            w.writerow([t + 1] + [fmt(self.per_iteration_rmse[m][t]) for m in cols])
        return out.getvalue()

    def long_table(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method", "iteration", "rmse", "mean_bias"])
        for m in self._ordered():
            if m not in self.per_iteration_rmse:
                continue
            for t in range(self.n_iterations):
                w.writerow([m, t + 1, repr(float(self.per_iteration_rmse[m][t])), repr(float(self.mean_bias[m][t]))])
        return out.getvalue()

    def timings_table(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method", "fit_seconds", "estimate_seconds_per_respondent"])
        for m in self._ordered():
            if m in self.timings:
                t = self.timings[m]
                w.writerow([m, f"{t['fit_seconds']:.6f}", f"{t['estimate_seconds_per_respondent']:.6f}"])
        return out.getvalue()

    def to_dict(self, include_timings: bool = False) -> dict:
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        doc = {
            "version": 1,
            "metadata": self.metadata,
            "methods": list(self._ordered()),
            "n_iterations": self.n_iterations,
            "mean_rmse": {m: v for m, v in self.mean_rmse.items()},
            "per_iteration_rmse": {m: clean(v) for m, v in self.per_iteration_rmse.items()},
            "mean_bias": {m: clean(v) for m, v in self.mean_bias.items()},
            "spearman": clean(self.spearman),
            "failures": self.failures,
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=1, sort_keys=True) + "\n"


def _timed(fn: Callable, repeats: int):
    """Run ``fn`` ``repeats`` times; return the first result and the median wall time."""
    times, result = [], None
    for i in range(max(1, repeats)):
        t0 = time.perf_counter()
        r = fn()
        times.append(time.perf_counter() - t0)
        if i == 0:
            result = r
    return result, statistics.median(times)


def estimate_methods(
    train: ResponsePanel,
    test: ResponsePanel,
    methods: Sequence[str] = METHODS,
    config: BenchmarkConfig = BenchmarkConfig(),
):
    """Fit each method on ``train`` and estimate every test respondent at every iteration.

    The estimate at iteration ``t`` only uses that respondent's responses
    ``1..t``. Returns ``(estimates, timings, failures)`` keyed by method.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise InvalidArgumentError(f"unknown methods {sorted(unknown)}; expected a subset of {METHODS}")
    if set(train.ids) & set(test.ids):
        raise InvalidArgumentError("train and test respondents must be disjoint")
    n_test = max(1, test.n_respondents)
    estimates, timings, failures = {}, {}, {}

    def record(name, fit_fn, est_fn):
        try:
            model, fit_s = _timed(fit_fn, config.timing_repeats)
            t0 = time.perf_counter()
            estimates[name] = est_fn(model)
            timings[name] = {
                "fit_seconds": fit_s,
                "estimate_seconds_per_respondent": (time.perf_counter() - t0) / n_test,
            }
        except Exception as exc:  # one failing method must not stop the run
            log.warning("method %s failed: %s", name, exc)
            failures[name] = f"{type(exc).__name__}: {exc}"

    if "growth" in methods:
        record("growth", lambda: fit_growth_model(train, config.k_growth, config.weight_sd), lambda m: estimate_panel(m, test))
    if "elo" in methods:
        record(
            "elo",
            lambda: EloConfig.constant(config.k_elo, fit_start_theta(train)),
            lambda cfg: elo_matrix(test, cfg),
        )
    glmm_methods = [m for m in ("glmm_fixed", "glmm_ml", "glmm_refit") if m in methods]
    if glmm_methods:
        try:
            glmm, fit_s = _timed(lambda: fit_glmm(train, config.nodes), config.timing_repeats)
        except Exception as exc:
            log.warning("GLMM fit failed: %s", exc)
            for m in glmm_methods:
                failures[m] = f"{type(exc).__name__}: {exc}"
        else:
            beta = np.asarray(glmm.beta)[: test.difficulty.shape[1]]

            def fixed(_):
                return np.where(test.mask, beta[None, :], np.nan)

            def ml(_):
                return prefix_abilities_ml(glmm, test)

            def refit(_):
                refitter = GlmmRefitter(glmm, train)
                return np.vstack([refitter.abilities(test, j) for j in range(test.n_respondents)])

            for name, fn in (("glmm_fixed", fixed), ("glmm_ml", ml), ("glmm_refit", refit)):
                if name in glmm_methods:
                    record(name, lambda: glmm, fn)
                    if name in timings:
                        timings[name]["fit_seconds"] = fit_s
    return estimates, timings, failures


def benchmark(
    train: ResponsePanel,
    test: ResponsePanel,
    test_truth: np.ndarray,
    methods: Sequence[str] = METHODS,
    scenario: str | int | None = None,
    config: BenchmarkConfig = BenchmarkConfig(),
    metadata: dict | None = None,
) -> EvalReport:
    """Fit every method on ``train`` and score per-iteration RMSE on ``test``."""
    estimates, timings, failures = estimate_methods(train, test, methods, config)
    width = test.difficulty.shape[1]
    elo_test = elo_matrix(test, EloConfig.constant(config.k_growth, fit_start_theta(train)))
    meta = {"scenario": scenario, "config": asdict(config), "n_train": train.n_respondents, "n_test": test.n_respondents}
    meta.update(metadata or {})
    return EvalReport(
        methods=tuple(m for m in methods),
        n_iterations=width,
        per_iteration_rmse={m: rmse_per_iteration(e, test_truth) for m, e in estimates.items()},
        mean_bias={m: mean_bias_per_iteration(e, test_truth) for m, e in estimates.items()},
        spearman=spearman_per_iteration(elo_test, test_truth),
        timings=timings,
        failures=failures,
        metadata=meta,
    )


# --- training-size study --------------------------------------------------


@dataclass(frozen=True)
class SizeRow:
    size: int
    method: str
    mean_rmse: float


def training_size_study(
    train: ResponsePanel,
    test: ResponsePanel,
    test_truth: np.ndarray,
    sizes: Sequence[int],
    methods: Sequence[str] = ("growth", "elo", "glmm_ml"),
    seed: int = 0,
    config: BenchmarkConfig = BenchmarkConfig(timing_repeats=1),
) -> list[SizeRow]:
    """Mean test RMSE per method when only ``size`` training respondents are available."""
    rows = []
    rng = np.random.default_rng(seed)
    for size in sizes:
        if not 2 <= size <= train.n_respondents:
            raise InvalidArgumentError(f"size {size} outside 2..{train.n_respondents}")
        if size == train.n_respondents:
            sub = train
        else:
            sub = train.subset(sorted(rng.choice(train.n_respondents, size, replace=False).tolist()))
        estimates, _, failures = estimate_methods(sub, test, methods, config)
        for m in methods:
            value = float(np.nanmean(rmse_per_iteration(estimates[m], test_truth))) if m in estimates else math.nan
            rows.append(SizeRow(int(size), m, value))
    return rows


def size_table(rows: Sequence[SizeRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["size", "method", "mean_rmse"])
    for r in rows:
        w.writerow([r.size, r.method, repr(r.mean_rmse)])
    return out.getvalue()


def elbow(rows: Sequence[SizeRow], method: str, tolerance: float = 0.05) -> int | None:
    """Smallest size whose RMSE is within ``tolerance`` of the method's best."""
    pts = sorted((r.size, r.mean_rmse) for r in rows if r.method == method and math.isfinite(r.mean_rmse))
    if not pts:
        return None
    best = min(v for _, v in pts)
    return next(s for s, v in pts if v <= best + tolerance)
