"""Pairwise Bayesian skill rating with draws, per performance metric.

Each (condition, metric) pair is one participant in a one-versus-one
ladder.  A participant's skill is a Gaussian belief (mu, sigma); every
judged match updates both participants by moment matching the posterior of
the standard two-player performance model: skills s_i ~ N(mu_i, sigma_i^2),
performances p_i ~ N(s_i, beta^2), and "a beats b" meaning
p_a - p_b > eps, with ties inside the +-eps band.

The update here is the closed-form two-player TrueSkill rule.  Its moments
are exact for this model, which is what ``tools/rating_oracle.py`` checks
by direct numerical integration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

from scipy.special import ndtr, ndtri

__all__ = [
    "ANSWERS",
    "Judgment",
    "MatchOutcome",
    "METRICS",
    "QUESTIONS",
    "Rating",
    "RatingConfig",
    "RatingError",
    "RatingStore",
    "draw_margin",
    "ingest_judgment",
    "leaderboard",
    "pairwise_table",
    "rating_trace",
    "update_pair",
]


class RatingError(ValueError):
    """Raised for invalid ratings, results, or judgment payloads."""


#: The three judged aspects of a match, in question order.
METRICS = ("best", "fastest", "human_like")

#: Wording shown to evaluators, one question per metric.
QUESTIONS = (
    "Which agent best completed the task?",
    "Which agent was the fastest completing the task?",
    "Which agent had a more human-like behavior?",
)

#: Allowed answers to every question.
ANSWERS = ("Agent 1", "Agent 2", "None")

_RESULTS = ("a_wins", "b_wins", "draw")


@dataclass(frozen=True)
class Rating:
    """Gaussian skill belief."""

    mu: float = 25.0
    sigma: float = 25.0 / 3.0

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise RatingError(f"rating must be finite, got ({self.mu}, {self.sigma})")
        if self.sigma <= 0:
            raise RatingError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RatingConfig:
    """Ladder parameters.

    ``beta`` is the per-player performance deviation, ``tau`` the dynamics
    noise added before every match, and ``draw_probability`` the chance of
    a draw between evenly matched players that sets the draw margin.
    """

    mu0: float = 25.0
    sigma0: float = 25.0 / 3.0
    beta: float = 25.0 / 6.0
    tau: float = 25.0 / 300.0
    draw_probability: float = 0.10

    def __post_init__(self):
        if self.beta <= 0:
            raise RatingError(f"beta must be positive, got {self.beta}")
        if self.tau < 0:
            raise RatingError(f"tau must be non-negative, got {self.tau}")
        if not (0.0 <= self.draw_probability < 1.0):
            raise RatingError(
                f"draw_probability must lie in [0, 1), got {self.draw_probability}")

    def fresh(self) -> Rating:
        return Rating(self.mu0, self.sigma0)


@dataclass(frozen=True)
class MatchOutcome:
    """One scored comparison on one metric."""

    metric: str
    player_a: str
    player_b: str
    result: str

    def __post_init__(self):
        if self.metric not in METRICS:
            raise RatingError(f"unknown metric {self.metric!r}")
        if self.result not in _RESULTS:
            raise RatingError(f"unknown result {self.result!r}")


@dataclass(frozen=True)
class Judgment:
    """One evaluator's answers to the three questions about a match."""

    match_id: str
    evaluator: str
    answers: tuple[str, str, str]

    def __post_init__(self):
        if len(self.answers) != len(QUESTIONS):
            raise RatingError(
                f"expected {len(QUESTIONS)} answers, got {len(self.answers)}")
        for answer in self.answers:
            if answer not in ANSWERS:
                raise RatingError(f"answer {answer!r} not one of {ANSWERS}")


def draw_margin(config: RatingConfig) -> float:
    """Performance-difference band that counts as a draw.

    For a single pair of players the chance that two equal performances
    land within ``eps`` of each other is ``2 Phi(eps / (sqrt(2) beta)) - 1``;
    inverting at the configured draw probability gives the margin.
    """
    return float(ndtri((config.draw_probability + 1.0) / 2.0)
                 * math.sqrt(2.0) * config.beta)


def _pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _v_w_win(t: float, eps: float) -> tuple[float, float]:
    """Mean and precision corrections for a decisive result.

    These are the first two moments of a unit Gaussian truncated to
    ``x > eps - t``; the guarded branch takes over where the cdf underflows
    (hopeless upsets), where the exact ratio tends to ``eps - t``.
    """
    denom = float(ndtr(t - eps))
    if denom < 1e-300:
        v = eps - t
        return v, 1.0
    v = _pdf(t - eps) / denom
    return v, v * (v + t - eps)


def _v_w_draw(t: float, eps: float) -> tuple[float, float]:
    """Corrections for a draw: moments of truncation to ``|x - t| <= eps``."""
    abs_t = abs(t)
    denom = float(ndtr(eps - abs_t) - ndtr(-eps - abs_t))
    if denom < 1e-300:
        v = -t if t >= 0 else abs_t
        return v, 1.0
    pdf_lo = _pdf(-eps - abs_t)
    pdf_hi = _pdf(eps - abs_t)
    v = (pdf_lo - pdf_hi) / denom
    if t < 0:
        v = -v
    w = v * v + ((eps - abs_t) * pdf_hi + (eps + abs_t) * pdf_lo) / denom
    return v, w


def update_pair(a: Rating, b: Rating, result: str,
                config: RatingConfig = RatingConfig()) -> tuple[Rating, Rating]:
    """Posterior ratings after one match between ``a`` and ``b``."""
    if result not in _RESULTS:
        raise RatingError(f"unknown result {result!r}")
    var_a = a.sigma * a.sigma + config.tau * config.tau
    var_b = b.sigma * b.sigma + config.tau * config.tau
    c_sq = 2.0 * config.beta * config.beta + var_a + var_b
    c = math.sqrt(c_sq)
    eps = draw_margin(config) / c

    if result == "draw":
        t = (a.mu - b.mu) / c
        v, w = _v_w_draw(t, eps)
        sign = 1.0
    else:
        winner_first = result == "a_wins"
        t = ((a.mu - b.mu) if winner_first else (b.mu - a.mu)) / c
        v, w = _v_w_win(t, eps)
        sign = 1.0 if winner_first else -1.0

    mu_a = a.mu + sign * (var_a / c) * v
    mu_b = b.mu - sign * (var_b / c) * v
    sigma_a = math.sqrt(var_a * (1.0 - (var_a / c_sq) * w))
    sigma_b = math.sqrt(var_b * (1.0 - (var_b / c_sq) * w))
    for value in (mu_a, mu_b, sigma_a, sigma_b):
        if not math.isfinite(value):
            raise RatingError("rating update produced a non-finite value")
    return Rating(mu_a, sigma_a), Rating(mu_b, sigma_b)


class RatingStore:
    """Ladder state: one rating table per metric plus the ordered match log.

    The store is deliberately a fold over its log: replaying the same
    outcomes in the same order reproduces every rating bit for bit, and the
    persisted form *is* the log.
    """

    def __init__(self, config: RatingConfig = RatingConfig()):
        self.config = config
        self.ratings: dict[str, dict[str, Rating]] = {m: {} for m in METRICS}
        self.log: list[MatchOutcome] = []
        self.matches: dict[str, tuple[str, str]] = {}
        self.participants: set[str] = set()
        self._traces: dict[str, dict[str, list[tuple[int, Rating]]]] = {
            m: {} for m in METRICS}

    # -- registration ------------------------------------------------------

    def register_match(self, match_id: str, player_a: str, player_b: str):
        """Declare which conditions sat in seats 1 and 2 of a match."""
        if match_id in self.matches and self.matches[match_id] != (player_a, player_b):
            raise RatingError(f"match {match_id!r} already registered differently")
        self.matches[match_id] = (player_a, player_b)
        self.participants.update((player_a, player_b))

    def rating_of(self, metric: str, player: str) -> Rating:
        return self.ratings[metric].get(player, self.config.fresh())

    # -- scoring -----------------------------------------------------------

    def record(self, outcome: MatchOutcome) -> None:
        new_a, new_b = update_pair(
            self.rating_of(outcome.metric, outcome.player_a),
            self.rating_of(outcome.metric, outcome.player_b),
            outcome.result, self.config)
        table = self.ratings[outcome.metric]
        table[outcome.player_a] = new_a
        table[outcome.player_b] = new_b
        self.participants.update((outcome.player_a, outcome.player_b))
        self.log.append(outcome)
        index = len(self.log)
        trace = self._traces[outcome.metric]
        trace.setdefault(outcome.player_a, []).append((index, new_a))
        trace.setdefault(outcome.player_b, []).append((index, new_b))


def ingest_judgment(store: RatingStore, judgment: Judgment) -> list[MatchOutcome]:
    """Score one judgment: each question becomes one outcome on its metric."""
    if judgment.match_id not in store.matches:
        raise RatingError(f"unknown match id {judgment.match_id!r}")
    player_a, player_b = store.matches[judgment.match_id]
    outcomes = []
    for metric, answer in zip(METRICS, judgment.answers):
        result = {"Agent 1": "a_wins", "Agent 2": "b_wins", "None": "draw"}[answer]
        outcome = MatchOutcome(metric, player_a, player_b, result)
        store.record(outcome)
        outcomes.append(outcome)
    return outcomes


def leaderboard(store: RatingStore, metric: str) -> list[tuple[str, Rating]]:
    """Participants on one metric, sorted by mean skill, best first.

    Registered participants with no matches yet sit at the prior.  Ties
    break by name so the listing is stable across runs.
    """
    if metric not in METRICS:
        raise RatingError(f"unknown metric {metric!r}")
    table = store.ratings[metric]
    entries = [(name, table.get(name, store.config.fresh()))
               for name in store.participants | set(table)]
    return sorted(entries, key=lambda item: (-item[1].mu, item[0]))


def rating_trace(store: RatingStore, metric: str,
                 condition: str) -> list[tuple[int, Rating]]:
    """Rating after every logged match involving ``condition``, in order."""
    if metric not in METRICS:
        raise RatingError(f"unknown metric {metric!r}")
    return list(store._traces[metric].get(condition, []))


def pairwise_table(store: RatingStore, metric: str) -> dict[tuple[str, str], dict]:
    """Win/loss/draw fractions for every condition pair seen on a metric."""
    if metric not in METRICS:
        raise RatingError(f"unknown metric {metric!r}")
    counts: dict[tuple[str, str], list[int]] = {}
    for outcome in store.log:
        if outcome.metric != metric:
            continue
        a, b = outcome.player_a, outcome.player_b
        flipped = (b, a) in counts or (a > b and (a, b) not in counts)
        key = (b, a) if flipped else (a, b)
        row = counts.setdefault(key, [0, 0, 0])
        if outcome.result == "draw":
            row[2] += 1
        elif (outcome.result == "a_wins") != flipped:
            row[0] += 1
        else:
            row[1] += 1
    table = {}
    for key, (wins_a, wins_b, draws) in counts.items():
        total = wins_a + wins_b + draws
        table[key] = {
            "a_wins": wins_a / total,
            "b_wins": wins_b / total,
            "draws": draws / total,
            "matches": total,
        }
    return table


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_log(store: RatingStore, path) -> None:
    """Write the store as line-delimited records (matches, then outcomes)."""
    lines = []
    for match_id in sorted(store.matches):
        player_a, player_b = store.matches[match_id]
        lines.append(json.dumps(
            {"kind": "match", "id": match_id, "a": player_a, "b": player_b},
            sort_keys=True))
    for outcome in store.log:
        lines.append(json.dumps(
            {"kind": "outcome", "metric": outcome.metric, "a": outcome.player_a,
             "b": outcome.player_b, "result": outcome.result}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_log(path, config: RatingConfig = RatingConfig()) -> RatingStore:
    """Rebuild a store by replaying a persisted log in order."""
    store = RatingStore(config)
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record["kind"] == "match":
            store.register_match(record["id"], record["a"], record["b"])
        elif record["kind"] == "outcome":
            store.record(MatchOutcome(record["metric"], record["a"],
                                      record["b"], record["result"]))
        else:
            raise RatingError(f"unknown record kind {record['kind']!r}")
    return store


def export_leaderboards(store: RatingStore, path) -> None:
    """All metrics' standings as one CSV with a fixed header."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "condition", "mu", "sigma"])
        for metric in METRICS:
            for condition, rating in leaderboard(store, metric):
                writer.writerow([metric, condition,
                                 f"{rating.mu:.6f}", f"{rating.sigma:.6f}"])
