"""Shared domain types, the Rasch link and the rating-scale transform."""

from __future__ import annotations

import math
import os
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

LN10 = math.log(10.0)
RATING_CENTER = 1500.0
RATING_SCALE = 400.0


class InvalidArgumentError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ConvergenceError(RuntimeError):
    """Raised when an optimizer stops without meeting its convergence test.

    The best point seen so far is kept on the exception so callers can
    inspect or reuse it.
    """

    def __init__(self, message: str, best=None, n_evaluations: int | None = None):
        super().__init__(message)
        self.best = best
        self.n_evaluations = n_evaluations


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidArgumentError(f"{name} must be finite, got {value!r}")
    return value


def rasch_probability(theta: float, d: float) -> float:
    """Probability of a correct response, ``exp(theta - d) / (1 + exp(theta - d))``."""
    x = _require_finite("theta", theta) - _require_finite("d", d)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logistic(x: np.ndarray) -> np.ndarray:
    """Vectorised logistic function, stable for large ``|x|``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log1pexp(x: np.ndarray) -> np.ndarray:
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def bernoulli_loglik(eta: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise ``y * eta - log(1 + exp(eta))``."""
    return y * eta - log1pexp(eta)


def rating_to_theta(rating: float) -> float:
    """Map an Elo-scale rating onto the logit (theta) scale."""
    rating = _require_finite("rating", rating)
    return (rating - RATING_CENTER) / RATING_SCALE * LN10


def theta_to_rating(theta: float) -> float:
    """Inverse of :func:`rating_to_theta`."""
    theta = _require_finite("theta", theta)
    return theta / LN10 * RATING_SCALE + RATING_CENTER


@dataclass(frozen=True)
class Response:
    respondent_id: str
    iteration: int
    difficulty: float
    outcome: int
    components: tuple[str, ...] = ()

    def __post_init__(self):
        if int(self.iteration) != self.iteration or self.iteration < 1:
            raise InvalidArgumentError(f"iteration must be an integer >= 1, got {self.iteration!r}")
        if self.outcome not in (0, 1):
            raise InvalidArgumentError(f"outcome must be 0 or 1, got {self.outcome!r}")
        if not math.isfinite(self.difficulty):
            raise InvalidArgumentError(f"difficulty must be finite, got {self.difficulty!r}")


@dataclass(frozen=True)
class AbilityEstimate:
    respondent_id: str
    iteration: int
    theta_hat: float

    def __post_init__(self):
        if not math.isfinite(self.theta_hat):
            raise InvalidArgumentError(f"theta_hat must be finite, got {self.theta_hat!r}")


class ResponsePanel:
    """Per-respondent response sequences stored as padded matrices.

    Row ``j`` holds respondent ``ids[j]``; column ``t - 1`` holds iteration
    ``t``. Each respondent covers a prefix ``1..lengths[j]`` of the
    iterations, so a balanced panel is one where every length equals
    ``n_iterations``. Entries past a respondent's length are NaN in
    ``difficulty`` and 0 in ``outcome``. Arrays are read-only.
    """

    def __init__(
        self,
        ids: Sequence[str],
        difficulty: np.ndarray,
        outcome: np.ndarray,
        lengths: Sequence[int] | None = None,
        components: Sequence[Sequence[tuple[str, ...]]] | None = None,
    ):
        ids = tuple(str(i) for i in ids)
        difficulty = np.array(difficulty, dtype=float, ndmin=2)
        outcome = np.array(outcome, ndmin=2)
        if difficulty.shape != outcome.shape or difficulty.shape[0] != len(ids):
            raise InvalidArgumentError(
                f"shape mismatch: {len(ids)} ids, difficulty {difficulty.shape}, outcome {outcome.shape}"
            )
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("respondent ids must be unique")
        n, width = difficulty.shape
        if lengths is None:
            lengths = np.full(n, width, dtype=int)
        lengths = np.asarray(lengths, dtype=int)
        if lengths.shape != (n,) or np.any(lengths < 0) or np.any(lengths > width):
            raise InvalidArgumentError("lengths must lie in [0, n_iterations]")
        mask = np.arange(width)[None, :] < lengths[:, None]
        if not np.all(np.isfinite(difficulty[mask])):
            raise InvalidArgumentError("difficulties must be finite")
        observed = outcome[mask]
        if not np.all((observed == 0) | (observed == 1)):
            raise InvalidArgumentError("outcomes must be 0 or 1")
        difficulty = np.where(mask, difficulty, np.nan)
        outcome = np.where(mask, outcome, 0).astype(np.int8)
        if components is not None:
            components = tuple(tuple(tuple(c) for c in row[:ln]) for row, ln in zip(components, lengths))
            if any(len(row) != ln for row, ln in zip(components, lengths)):
                raise InvalidArgumentError("components must cover every observed response")
        for arr in (difficulty, outcome, lengths, mask):
            arr.setflags(write=False)
        self.ids = ids
        self.difficulty = difficulty
        self.outcome = outcome
        self.lengths = lengths
        self.mask = mask
        self.components = components
        self._index = {rid: j for j, rid in enumerate(ids)}

    @classmethod
    def from_responses(cls, responses: Iterable[Response]) -> ResponsePanel:
        """Group responses by respondent; iterations must run 1, 2, ... without gaps."""
        grouped: dict[str, list[Response]] = {}
        for r in responses:
            grouped.setdefault(r.respondent_id, []).append(r)
        width = 0
        for rid, seq in grouped.items():
            for expected, r in enumerate(seq, start=1):
                if r.iteration != expected:
                    raise InvalidArgumentError(
                        f"respondent {rid!r}: expected iteration {expected}, got {r.iteration} "
                        "(iterations must be strictly increasing from 1 without gaps)"
                    )
            width = max(width, len(seq))
        ids = list(grouped)
        n = len(ids)
        difficulty = np.full((n, width), np.nan)
        outcome = np.zeros((n, width), dtype=np.int8)
        lengths = np.zeros(n, dtype=int)
        has_components = any(r.components for seq in grouped.values() for r in seq)
        components = [] if has_components else None
        for j, rid in enumerate(ids):
            seq = grouped[rid]
            lengths[j] = len(seq)
            difficulty[j, : len(seq)] = [r.difficulty for r in seq]
            outcome[j, : len(seq)] = [r.outcome for r in seq]
            if components is not None:
                components.append([r.components for r in seq])
        return cls(ids, difficulty, outcome, lengths, components)

    @property
    def n_respondents(self) -> int:
        return len(self.ids)

    @property
    def n_iterations(self) -> int:
        return int(self.lengths.max()) if len(self.lengths) else 0

    @property
    def is_balanced(self) -> bool:
        return bool(np.all(self.lengths == self.difficulty.shape[1]))

    def require_balanced(self) -> None:
        if not self.is_balanced:
            short = [rid for rid, ln in zip(self.ids, self.lengths) if ln < self.difficulty.shape[1]]
            raise InvalidArgumentError(
                f"training panel must be balanced; {len(short)} respondent(s) lack iterations, e.g. {short[0]!r}"
            )

    def index_of(self, respondent_id: str) -> int:
        return self._index[respondent_id]

    def responses(self, respondent_id: str) -> tuple[Response, ...]:
        j = self._index[respondent_id]
        comps = self.components[j] if self.components is not None else None
        return tuple(
            Response(
                respondent_id,
                t + 1,
                float(self.difficulty[j, t]),
                int(self.outcome[j, t]),
                comps[t] if comps is not None else (),
            )
            for t in range(self.lengths[j])
        )

    def __iter__(self) -> Iterator[Response]:
        for rid in self.ids:
            yield from self.responses(rid)

    def sequences(self) -> Iterator[tuple[str, tuple[Response, ...]]]:
        """``(respondent_id, responses)`` pairs in panel order."""
        for rid in self.ids:
            yield rid, self.responses(rid)

    def __len__(self) -> int:
        return self.n_respondents

    def subset(self, rows: Sequence[int]) -> ResponsePanel:
        rows = list(rows)
        comps = [self.components[j] for j in rows] if self.components is not None else None
        return ResponsePanel(
            [self.ids[j] for j in rows],
            self.difficulty[rows],
            self.outcome[rows],
            self.lengths[rows],
            comps,
        )

    def select(self, respondent_ids: Iterable[str]) -> ResponsePanel:
        return self.subset([self._index[rid] for rid in respondent_ids])

    def prefix(self, t: int) -> ResponsePanel:
        """Keep iterations ``1..t`` only."""
        lengths = np.minimum(self.lengths, t)
        comps = self.components
        if comps is not None:
            comps = [row[:t] for row in comps]
        return ResponsePanel(self.ids, self.difficulty[:, :t], self.outcome[:, :t], lengths, comps)

    def __eq__(self, other):
        if not isinstance(other, ResponsePanel):
            return NotImplemented
        return (
            self.ids == other.ids
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.difficulty, other.difficulty, equal_nan=True)
            and np.array_equal(self.outcome, other.outcome)
            and self.components == other.components
        )

    def __repr__(self):
        kind = "balanced" if self.is_balanced else "ragged"
        return f"ResponsePanel({self.n_respondents} respondents x {self.n_iterations} iterations, {kind})"


def worker_count() -> int:
    """Thread cap from ``ABILITY_TRACE_THREADS`` (defaults to the CPU count)."""
    raw = os.environ.get("ABILITY_TRACE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise InvalidArgumentError(f"ABILITY_TRACE_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
