"""Episode replay files: one text document per episode.

A replay is the judged artifact of this pipeline, standing in for the
screen recordings a human study would use.  The layout is line oriented so
that both this package and the browser client can parse it with a string
split per line: a JSON header, one positional record per tick, and a JSON
footer.

Tick record, pipe separated::

    T|tick|flags|yaw|pitch|equip|labels|subtask|ex|ey|eh[|gx|gy|gh]

``flags`` is the action's button bitmask and ``labels`` the state-label
bitmask.  The trailing ground-truth pose is a test sidecar; stripping it
leaves every agent-visible field untouched.  Floats are written with
``repr`` so parsing reproduces them bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .control import EpisodeResult
from .odometry import Pose, export_map
from .perception import StateLabelSet
from .world import (ActionFrame, EpisodeOutcome, WorldConfig,
                    action_from_record, action_to_record)

__all__ = [
    "FORMAT_NAME",
    "FORMAT_VERSION",
    "Replay",
    "ReplayError",
    "ReplayStore",
    "ReplayTick",
    "TICK_RATE",
    "from_episode",
    "parse_replay",
    "replay_id",
    "serialize_replay",
    "strip_ground_truth",
]

FORMAT_NAME = "gridquest-replay"
FORMAT_VERSION = 1
TICK_RATE = 20


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class ReplayTick:
    """One tick of an episode as persisted in a replay."""

    tick: int
    action: ActionFrame
    labels: StateLabelSet
    subtask: str
    est: Pose
    truth: Optional[Pose] = None


@dataclass
class Replay:
    """Parsed replay document: header fields, tick records, footer."""

    task: str
    condition: str
    seed: int
    world: dict
    world_digest: str
    has_truth: bool
    ticks: list
    outcome: EpisodeOutcome
    map_export: dict

    @property
    def replay_id(self) -> str:
        return replay_id(self.task, self.condition, self.seed)


def replay_id(task: str, condition: str, seed: int) -> str:
    return f"{task}-{condition}-{seed}"


def from_episode(result: EpisodeResult, config: WorldConfig) -> Replay:
    """Build a replay from a finished episode.

    The footer map uses the agent's own pose estimates, matching what a
    viewer is allowed to see; ground truth rides along per tick until
    stripped.
    """
    ticks = [
        ReplayTick(tick=i, action=r.action, labels=r.labels, subtask=r.subtask,
                   est=r.est, truth=r.truth)
        for i, r in enumerate(result.records)
    ]
    map_export = export_map(result.feature_map, (r.est for r in result.records))
    return Replay(task=result.task, condition=result.condition, seed=config.seed,
                  world=config.to_dict(), world_digest=result.world_digest,
                  has_truth=True, ticks=ticks, outcome=result.outcome,
                  map_export=map_export)


def strip_ground_truth(replay: Replay) -> Replay:
    """Drop the per-tick truth sidecar; all agent-visible fields survive."""
    ticks = [replace(t, truth=None) for t in replay.ticks]
    return replace(replay, has_truth=False, ticks=ticks)


def serialize_replay(replay: Replay) -> str:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tick_rate": TICK_RATE,
        "task": replay.task,
        "condition": replay.condition,
        "seed": replay.seed,
        "world": replay.world,
        "world_digest": replay.world_digest,
        "has_truth": replay.has_truth,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for record in replay.ticks:
        fields = [
            "T", str(record.tick), action_to_record(record.action),
            str(record.labels.to_bits()), record.subtask,
            repr(record.est.x), repr(record.est.y), repr(record.est.heading),
        ]
        if replay.has_truth:
            if record.truth is None:
                raise ReplayError(f"tick {record.tick} missing ground truth")
            fields += [repr(record.truth.x), repr(record.truth.y),
                       repr(record.truth.heading)]
        lines.append("|".join(fields))
    footer = {"outcome": replay.outcome.to_dict(), "map": replay.map_export}
    lines.append(json.dumps(footer, sort_keys=True))
    return "\n".join(lines) + "\n"


def parse_replay(text: str) -> Replay:
    lines = text.splitlines()
    if len(lines) < 2:
        raise ReplayError("replay needs at least a header and a footer")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME:
        raise ReplayError(f"not a replay document: {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ReplayError(f"unsupported replay version {header.get('version')!r}")
    if header.get("tick_rate") != TICK_RATE:
        raise ReplayError(f"unexpected tick rate {header.get('tick_rate')!r}")
    has_truth = bool(header["has_truth"])
    width = 14 if has_truth else 11
    ticks = []
    for line in lines[1:-1]:
        parts = line.split("|")
        if parts[0] != "T" or len(parts) != width:
            raise ReplayError(f"bad tick record: {line!r}")
        index = int(parts[1])
        if index != len(ticks):
            raise ReplayError(f"tick indices not contiguous at {index}")
        action = action_from_record("|".join(parts[2:6]))
        labels = StateLabelSet.from_bits(int(parts[6]))
        est = Pose(float(parts[8]), float(parts[9]), float(parts[10]))
        truth = (Pose(float(parts[11]), float(parts[12]), float(parts[13]))
                 if has_truth else None)
        ticks.append(ReplayTick(tick=index, action=action, labels=labels,
                                subtask=parts[7], est=est, truth=truth))
    footer = json.loads(lines[-1])
    return Replay(task=header["task"], condition=header["condition"],
                  seed=int(header["seed"]), world=dict(header["world"]),
                  world_digest=header["world_digest"], has_truth=has_truth,
                  ticks=ticks, outcome=EpisodeOutcome.from_dict(footer["outcome"]),
                  map_export=footer["map"])


class ReplayStore:
    """Directory of replay files addressed by replay id."""

    suffix = ".replay"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, replay_id_: str) -> Path:
        if "/" in replay_id_ or replay_id_.startswith("."):
            raise ReplayError(f"bad replay id {replay_id_!r}")
        return self.root / (replay_id_ + self.suffix)

    def save(self, replay: Replay) -> str:
        rid = replay.replay_id
        self.path(rid).write_text(serialize_replay(replay), encoding="utf-8")
        return rid

    def load(self, replay_id_: str) -> Replay:
        path = self.path(replay_id_)
        if not path.exists():
            raise ReplayError(f"no replay {replay_id_!r}")
        return parse_replay(path.read_text(encoding="utf-8"))

    def read_text(self, replay_id_: str) -> str:
        path = self.path(replay_id_)
        if not path.exists():
            raise ReplayError(f"no replay {replay_id_!r}")
        return path.read_text(encoding="utf-8")

    def ids(self) -> list:
        return sorted(p.name[:-len(self.suffix)]
                      for p in self.root.glob("*" + self.suffix))

    def header(self, replay_id_: str) -> dict:
        path = self.path(replay_id_)
        if not path.exists():
            raise ReplayError(f"no replay {replay_id_!r}")
        with open(path, encoding="utf-8") as handle:
            return json.loads(handle.readline())

    def catalog(self) -> dict:
        """Replay ids grouped as task -> condition -> sorted id list."""
        table: dict = {}
        for rid in self.ids():
            header = self.header(rid)
            table.setdefault(header["task"], {}).setdefault(
                header["condition"], []).append(rid)
        return table
