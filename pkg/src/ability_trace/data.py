"""Response-log ingestion, scenario construction and the synthetic generator.

Two delimited text formats are read:

* chess: ``player_id,month_index,player_rating_pre,opponent_rating,outcome``
  with outcome ``win``/``loss`` (``draw`` rows are rejected and counted).
  Opponent ratings become item difficulties and the player's own pre-game
  rating becomes the reference ability, both mapped onto the theta scale.
* generic: ``respondent_id,iteration,difficulty_theta,outcome[,components]``
  with outcome 0/1 and components separated by ``;``.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ability_trace.core import InvalidArgumentError, Response, ResponsePanel, logistic, rating_to_theta

CHESS_HEADER = ("player_id", "month_index", "player_rating_pre", "opponent_rating", "outcome")
GENERIC_HEADER = ("respondent_id", "iteration", "difficulty_theta", "outcome")
TRUTH_HEADER = ("respondent_id", "iteration", "theta_true")
DEFAULT_MIN_ACTIVE_MONTHS = 50
CURVES = ("linear", "logistic", "piecewise")
ITEM_POLICIES = ("matched", "jittered", "fixed_pool")


class IngestError(ValueError):
    """A malformed input row; ``line`` is the 1-based line number in the file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class GameRecord:
    player_id: str
    month_index: int
    player_rating_pre: float
    opponent_rating: float
    outcome: str


@dataclass(frozen=True)
class IngestResult:
    panel: ResponsePanel
    truth: np.ndarray
    rejected: tuple[tuple[int, str], ...] = ()
    dropped_players: tuple[str, ...] = ()


@dataclass(frozen=True)
class SyntheticPanel:
    panel: ResponsePanel
    true_theta: np.ndarray

    def __post_init__(self):
        if self.true_theta.shape != self.panel.difficulty.shape:
            raise InvalidArgumentError("true_theta must match the panel's shape")
        if not np.all(np.isfinite(self.true_theta)):
            raise InvalidArgumentError("true_theta must be finite")


@dataclass(frozen=True)
class ScenarioSpec:
    thinning: str = "every_month"
    split_fraction_test: float = 0.30
    split_seed: int = 0

    def __post_init__(self):
        if self.thinning not in ("every_month", "every_other_month"):
            raise InvalidArgumentError(f"unknown thinning {self.thinning!r}")
        if not 0.0 < self.split_fraction_test < 1.0:
            raise InvalidArgumentError("split_fraction_test must lie strictly between 0 and 1")

    @classmethod
    def scenario(cls, number: int, **kwargs) -> ScenarioSpec:
        if number not in (1, 2):
            raise InvalidArgumentError(f"scenario must be 1 or 2, got {number!r}")
        return cls("every_month" if number == 1 else "every_other_month", **kwargs)


class Scenario(NamedTuple):
    train: ResponsePanel
    test: ResponsePanel
    train_truth: np.ndarray | None
    test_truth: np.ndarray | None


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8")
    return source


def _rows(source, header: Sequence[str], optional: Sequence[str] = ()):
    handle = _open_text(source)
    try:
        reader = csv.reader(handle)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestError("empty file", 1) from None
        got = [h.strip() for h in got]
        if tuple(got[: len(header)]) != tuple(header) or any(h not in optional for h in got[len(header):]):
            raise IngestError(f"expected header {','.join(header)}, got {','.join(got)}", 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise IngestError(f"expected {len(got)} fields, got {len(row)}", reader.line_num)
            yield reader.line_num, [c.strip() for c in row], got
    finally:
        if handle is not source:
            handle.close()


def _finite(text: str, name: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"{name} is not a number: {text!r}", line) from None
    if not math.isfinite(value):
        raise IngestError(f"{name} must be finite, got {text!r}", line)
    return value


def _integer(text: str, name: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise IngestError(f"{name} is not an integer: {text!r}", line) from None


def read_game_records(source) -> tuple[list[tuple[int, GameRecord]], list[tuple[int, str]]]:
    """Parse a chess-format file into ``(line, record)`` pairs plus rejected draws."""
    records, rejected = [], []
    for line, row, _ in _rows(source, CHESS_HEADER):
        pid, month, rating, opp, outcome = row
        outcome = outcome.lower()
        if outcome == "draw":
            rejected.append((line, "draw"))
            continue
        if outcome not in ("win", "loss"):
            raise IngestError(f"outcome must be win, loss or draw, got {row[4]!r}", line)
        month_i = _integer(month, "month_index", line)
        if month_i < 1:
            raise IngestError(f"month_index must be >= 1, got {month_i}", line)
        records.append(
            (line, GameRecord(pid, month_i, _finite(rating, "player_rating_pre", line), _finite(opp, "opponent_rating", line), outcome))
        )
    return records, rejected


def ingest_game_records(
    source,
    min_active_months: int = DEFAULT_MIN_ACTIVE_MONTHS,
    max_iterations: int | None = None,
) -> IngestResult:
    """Build a balanced panel from chess game records.

    Each player's decisive games are taken in month order as iterations
    1, 2, ...; players with fewer than ``min_active_months`` decisive
    months are dropped and the rest are cut to their first
    ``max_iterations`` (default ``min_active_months``) months.
    """
    max_iterations = min_active_months if max_iterations is None else max_iterations
    if max_iterations < 1 or max_iterations > min_active_months:
        raise InvalidArgumentError("max_iterations must lie in 1..min_active_months")
    records, rejected = read_game_records(source)
    by_player: dict[str, list[tuple[int, GameRecord]]] = {}
    for line, rec in records:
        by_player.setdefault(rec.player_id, []).append((line, rec))
    responses, truth_rows, dropped = [], [], []
    for pid, rows in by_player.items():
        last = 0
        for line, rec in rows:
            if rec.month_index == last:
                raise IngestError(f"duplicate month {rec.month_index} for player {pid!r}", line)
            if rec.month_index < last:
                raise IngestError(f"months out of order for player {pid!r}: {rec.month_index} after {last}", line)
            last = rec.month_index
        if len(rows) < min_active_months:
            dropped.append(pid)
            continue
        thetas = []
        for it, (_, rec) in enumerate(rows[:max_iterations], start=1):
            responses.append(Response(pid, it, rating_to_theta(rec.opponent_rating), int(rec.outcome == "win")))
            thetas.append(rating_to_theta(rec.player_rating_pre))
        truth_rows.append(thetas)
    panel = ResponsePanel.from_responses(responses)
    truth = np.array(truth_rows, dtype=float).reshape(panel.n_respondents, -1)
    return IngestResult(panel, truth, tuple(rejected), tuple(dropped))


def read_generic_panel(source) -> ResponsePanel:
    responses = []
    for line, row, header in _rows(source, GENERIC_HEADER, optional=("components",)):
        outcome = _integer(row[3], "outcome", line)
        if outcome not in (0, 1):
            raise IngestError(f"outcome must be 0 or 1, got {outcome}", line)
        comps = tuple(c for c in row[4].split(";") if c) if len(row) > 4 else ()
        try:
            responses.append(Response(row[0], _integer(row[1], "iteration", line), _finite(row[2], "difficulty_theta", line), outcome, comps))
        except InvalidArgumentError as exc:
            raise IngestError(str(exc), line) from None
    try:
        return ResponsePanel.from_responses(responses)
    except InvalidArgumentError as exc:
        raise IngestError(str(exc)) from None


def _fmt(x: float) -> str:
    return repr(float(x))


def panel_to_text(panel: ResponsePanel) -> str:
    out = io.StringIO()
    with_comps = panel.components is not None
    header = list(GENERIC_HEADER) + (["components"] if with_comps else [])
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for r in panel:
        row = [r.respondent_id, r.iteration, _fmt(r.difficulty), r.outcome]
        if with_comps:
            row.append(";".join(r.components))
        writer.writerow(row)
    return out.getvalue()


def write_panel(panel: ResponsePanel, path) -> None:
    Path(path).write_text(panel_to_text(panel), encoding="utf-8")


def truth_to_text(panel: ResponsePanel, truth: np.ndarray) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRUTH_HEADER)
    for j, rid in enumerate(panel.ids):
        for t in range(panel.lengths[j]):
            writer.writerow([rid, t + 1, _fmt(truth[j, t])])
    return out.getvalue()


def write_truth(panel: ResponsePanel, truth: np.ndarray, path) -> None:
    Path(path).write_text(truth_to_text(panel, truth), encoding="utf-8")


def read_truth(source, panel: ResponsePanel) -> np.ndarray:
    """Reference abilities aligned to ``panel``'s rows and columns (NaN where absent)."""
    truth = np.full(panel.difficulty.shape, np.nan)
    for line, row, _ in _rows(source, TRUTH_HEADER):
        try:
            j = panel.index_of(row[0])
        except KeyError:
            raise IngestError(f"respondent {row[0]!r} is not in the panel", line) from None
        t = _integer(row[1], "iteration", line)
        if not 1 <= t <= truth.shape[1]:
            raise IngestError(f"iteration {t} outside the panel", line)
        truth[j, t - 1] = _finite(row[2], "theta_true", line)
    return truth


def thin(panel: ResponsePanel, thinning: str, truth: np.ndarray | None = None):
    """Keep every iteration, or iterations 1, 3, 5, ... renumbered 1, 2, 3, ..."""
    if thinning == "every_month":
        return panel, truth
    if thinning != "every_other_month":
        raise InvalidArgumentError(f"unknown thinning {thinning!r}")
    cols = np.arange(0, panel.difficulty.shape[1], 2)
    lengths = (panel.lengths + 1) // 2
    comps = None
    if panel.components is not None:
        comps = [row[::2] for row in panel.components]
    thinned = ResponsePanel(panel.ids, panel.difficulty[:, cols], panel.outcome[:, cols], lengths, comps)
    return thinned, (None if truth is None else truth[:, cols])


def split_respondents(ids: Sequence[str], fraction_test: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded split of row indices; ``floor(fraction_test * n)`` rows go to the test side."""
    n = len(ids)
    n_test = int(math.floor(fraction_test * n))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return train, test


def build_scenario(panel: ResponsePanel, spec: ScenarioSpec, truth: np.ndarray | None = None) -> Scenario:
    panel.require_balanced()
    thinned, thinned_truth = thin(panel, spec.thinning, truth)
    train_rows, test_rows = split_respondents(thinned.ids, spec.split_fraction_test, spec.split_seed)
    pick = (lambda rows: None) if thinned_truth is None else (lambda rows: thinned_truth[rows])
    return Scenario(thinned.subset(train_rows), thinned.subset(test_rows), pick(train_rows), pick(test_rows))


def growth_curve(curve: str, n_iterations: int, params: dict | None = None) -> np.ndarray:
    """Mean ability ``g(t)`` at iterations ``1..n_iterations``.

    ``linear``: ``intercept + slope * t``.
    ``logistic``: ``base + amplitude / (1 + exp(-rate * (t - midpoint)))``.
    ``piecewise``: linear interpolation through ``knots`` given as ``(t, value)`` pairs.
    """
    params = dict(params or {})
    t = np.arange(1, n_iterations + 1, dtype=float)
    if curve == "linear":
        return params.get("intercept", 0.0) + params.get("slope", 0.04) * t
    if curve == "logistic":
        mid = params.get("midpoint", (n_iterations + 1) / 2)
        return params.get("base", 0.0) + params.get("amplitude", 2.0) * logistic(params.get("rate", 0.3) * (t - mid))
    if curve == "piecewise":
        knots = params.get("knots", [(1, 0.0), ((n_iterations + 1) / 2, 1.5), (n_iterations, 2.0)])
        kt, kv = zip(*sorted(knots))
        return np.interp(t, kt, kv)
    raise InvalidArgumentError(f"unknown growth curve {curve!r}; expected one of {CURVES}")


def generate_synthetic(
    n_respondents: int,
    n_iterations: int,
    growth: str = "linear",
    ability_sd: float = 0.5,
    item_policy: str = "matched",
    seed: int = 0,
    growth_params: dict | None = None,
    spread_slope: float = 0.0,
    item_pool: Sequence[float] | None = None,
    item_jitter: float = 0.5,
) -> SyntheticPanel:
    """Draw a balanced panel with known abilities ``g(t) + z_j * s(t)``.

    ``s(t) = ability_sd + spread_slope * (t - 1)``. Item difficulties
    follow ``item_policy``: ``matched`` sets ``d = theta``, ``jittered``
    adds ``Normal(0, item_jitter)`` noise to it and ``fixed_pool`` draws
    uniformly from ``item_pool``. Everything is a function of ``seed``.
    """
    if n_respondents < 1 or n_iterations < 1:
        raise InvalidArgumentError("need at least one respondent and one iteration")
    if ability_sd < 0:
        raise InvalidArgumentError("ability_sd must be >= 0")
    if item_policy not in ITEM_POLICIES:
        raise InvalidArgumentError(f"unknown item policy {item_policy!r}; expected one of {ITEM_POLICIES}")
    g = growth_curve(growth, n_iterations, growth_params)
    spread = ability_sd + spread_slope * np.arange(n_iterations)
    if np.any(spread < 0):
        raise InvalidArgumentError("spread s(t) must stay non-negative")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_respondents)
    theta = g[None, :] + z[:, None] * spread[None, :]
    shape = theta.shape
    if item_policy == "matched":
        d = theta.copy()
    elif item_policy == "jittered":
        d = theta + item_jitter * rng.standard_normal(shape)
    else:
        if not item_pool:
            raise InvalidArgumentError("fixed_pool policy needs a non-empty item_pool")
        d = np.asarray(item_pool, dtype=float)[rng.integers(0, len(item_pool), size=shape)]
    y = (rng.random(shape) < logistic(theta - d)).astype(np.int8)
    width = len(str(n_respondents))
    ids = [f"r{j:0{width}d}" for j in range(n_respondents)]
    return SyntheticPanel(ResponsePanel(ids, d, y), theta)
