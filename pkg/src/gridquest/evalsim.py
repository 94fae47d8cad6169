"""Headless stand-ins for the human evaluation loop.

``sample_match`` draws a pair of replays the way evaluation forms were
assembled: task first, then an unordered pair of agent conditions, then one
replay per side, seat order randomized.  ``scripted_evaluator`` answers the
three form questions from replay contents alone, with a configurable slip
rate standing in for human disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rating import ANSWERS, Judgment
from .replay import Replay, ReplayStore
from .world import PRIMARY_PREDICATE

__all__ = [
    "EvalSimError",
    "HUMANLIKE_BONUS_CONDITION",
    "MatchRequest",
    "sample_match",
    "scripted_evaluator",
]

#: Condition whose replays come from the scripted demonstrator; the
#: simulated evaluator nudges its human-likeness score upward.
HUMANLIKE_BONUS_CONDITION = "Human"

_SCORE_MARGIN = 0.1


class EvalSimError(ValueError):
    pass


@dataclass(frozen=True)
class MatchRequest:
    """One evaluation form's worth of work: a task and two replays."""

    match_id: str
    task: str
    replay_a: str
    replay_b: str
    created: int


def sample_match(store: ReplayStore, rng: np.random.Generator,
                 created: int = 0, catalog: dict = None) -> MatchRequest:
    """Draw a task, a condition pair, and one replay per side."""
    if catalog is None:
        catalog = store.catalog()
    tasks = sorted(task for task, by_condition in catalog.items()
                   if len(by_condition) >= 2)
    if not tasks:
        raise EvalSimError("need replays from two conditions on a common task")
    task = tasks[rng.integers(len(tasks))]
    conditions = sorted(catalog[task])
    pairs = [(a, b) for i, a in enumerate(conditions)
             for b in conditions[i + 1:]]
    first, second = pairs[rng.integers(len(pairs))]
    pick_a = catalog[task][first][rng.integers(len(catalog[task][first]))]
    pick_b = catalog[task][second][rng.integers(len(catalog[task][second]))]
    if rng.integers(2):
        pick_a, pick_b = pick_b, pick_a
    match_id = f"match-{created:06d}-{rng.integers(16 ** 6):06x}"
    return MatchRequest(match_id=match_id, task=task,
                        replay_a=pick_a, replay_b=pick_b, created=created)


def _completed(replay: Replay) -> bool:
    return bool(replay.outcome.task_predicates.get(
        PRIMARY_PREDICATE[replay.task], False))


def _best_score(replay: Replay) -> float:
    return 2.0 * _completed(replay) + 1.0 * replay.outcome.terminated_by_snowball


def _straight_fraction(replay: Replay) -> float:
    """Share of ticks spent moving forward without turning."""
    if not replay.ticks:
        return 0.0
    smooth = sum(1 for t in replay.ticks
                 if t.action.forward and t.action.camera_yaw_delta == 0.0)
    return smooth / len(replay.ticks)


def _humanlike_score(replay: Replay) -> float:
    score = 1.0 * _completed(replay) + _straight_fraction(replay)
    if replay.condition == HUMANLIKE_BONUS_CONDITION:
        score += 0.75
    return score


def _pick(score_a: float, score_b: float, margin: float = _SCORE_MARGIN) -> str:
    if score_a > score_b + margin:
        return "Agent 1"
    if score_b > score_a + margin:
        return "Agent 2"
    return "None"


def _fastest_answer(replay_a: Replay, replay_b: Replay) -> str:
    done_a = replay_a.outcome.terminated_by_snowball
    done_b = replay_b.outcome.terminated_by_snowball
    if done_a and done_b:
        ticks_a = replay_a.outcome.ticks_elapsed
        ticks_b = replay_b.outcome.ticks_elapsed
        if ticks_a < ticks_b:
            return "Agent 1"
        if ticks_b < ticks_a:
            return "Agent 2"
        return "None"
    if done_a:
        return "Agent 1"
    if done_b:
        return "Agent 2"
    return "None"


def scripted_evaluator(replay_a: Replay, replay_b: Replay,
                       rng: np.random.Generator, match_id: str = "",
                       evaluator: str = "sim",
                       noise: float = 0.1) -> Judgment:
    """Answer the three questions about a replay pair.

    Each answer independently slips to one of the other two options with
    probability ``noise``.
    """
    if replay_a.task != replay_b.task:
        raise EvalSimError(
            f"task mismatch: {replay_a.task!r} vs {replay_b.task!r}")
    answers = [
        _pick(_best_score(replay_a), _best_score(replay_b), margin=0.5),
        _fastest_answer(replay_a, replay_b),
        _pick(_humanlike_score(replay_a), _humanlike_score(replay_b)),
    ]
    for i in range(len(answers)):
        if rng.random() < noise:
            others = [a for a in ANSWERS if a != answers[i]]
            answers[i] = others[rng.integers(len(others))]
    return Judgment(match_id, evaluator, tuple(answers))
