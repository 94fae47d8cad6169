"""Dead-reckoning pose estimation and landmark bookkeeping.

The estimator integrates the agent's own action stream and nothing else: it
never sees terrain, collisions, or pushes.  That is exactly why it is useful
as a test subject: whenever the simulator rejects a move (wall, world border)
the estimate keeps marching and the error grows by one commanded step per
blocked tick.

Conventions
-----------
Poses live in map coordinates anchored at the spawn point.  Heading is
degrees clockwise from north and always wrapped into ``[0, 360)``; north is
the +y axis and east is +x, so a forward step at heading ``h`` moves by
``(v * sin(h), v * cos(h))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

if TYPE_CHECKING:  # pragma: no cover - type-only import, world imports us at runtime
    from .world import ActionFrame

#: Seconds simulated by one tick (the world runs at 20 ticks per second).
TICK_SECONDS = 0.05

#: Metres travelled in one tick for each movement gait.
WALK_STEP = 0.216
SPRINT_STEP = 0.281
SPRINT_JUMP_STEP = 0.356


@dataclass(frozen=True)
class Pose:
    """Planar pose: metres east (x), metres north (y), heading in degrees."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0


@dataclass(frozen=True)
class SpeedModel:
    """Per-tick displacement for each gait plus the tick length in seconds."""

    walk: float = WALK_STEP
    sprint: float = SPRINT_STEP
    sprint_jump: float = SPRINT_JUMP_STEP
    tick_seconds: float = TICK_SECONDS

    def validate(self) -> None:
        for name in ("walk", "sprint", "sprint_jump", "tick_seconds"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"SpeedModel.{name} must be a positive finite number, got {value!r}")


DEFAULT_SPEEDS = SpeedModel()


def wrap_heading(degrees: float) -> float:
    """Wrap an angle into [0, 360)."""
    wrapped = degrees % 360.0
    # Python's % keeps the sign of the divisor, so the only stray case is -0.0.
    return 0.0 if wrapped == 0.0 else wrapped


def wrap_relative(degrees: float) -> float:
    """Wrap an angle difference into [-180, 180)."""
    return (degrees + 180.0) % 360.0 - 180.0


def movement_direction(action: "ActionFrame") -> Optional[tuple[float, float]]:
    """Unit direction of commanded movement in the body frame, or None.

    Body frame: x points to the agent's right, y points forward.  Opposed
    keys cancel; diagonals are normalised so every gait covers the same
    distance regardless of direction.
    """
    dx = (1.0 if action.right else 0.0) - (1.0 if action.left else 0.0)
    dy = (1.0 if action.forward else 0.0) - (1.0 if action.back else 0.0)
    if dx == 0.0 and dy == 0.0:
        return None
    norm = math.hypot(dx, dy)
    return dx / norm, dy / norm


def speed_for(action: "ActionFrame", model: SpeedModel = DEFAULT_SPEEDS) -> float:
    """Per-tick displacement selected by the sprint/jump flags.

    Jumping without sprinting moves at walking speed; the jump flag on its
    own only matters for climbing, which is the simulator's business.
    """
    if action.sprint and action.jump:
        return model.sprint_jump
    if action.sprint:
        return model.sprint
    return model.walk


def update(pose: Pose, action: "ActionFrame", model: SpeedModel = DEFAULT_SPEEDS) -> Pose:
    """Integrate one action frame and return the new pose estimate.

    The camera yaw is applied first, then the displacement is taken along
    the *new* heading.  The simulator uses this same function for its
    unobstructed kinematics, so on collision-free ground the estimate is
    exact to the last bit.
    """
    heading = wrap_heading(pose.heading + action.camera_yaw_delta)
    direction = movement_direction(action)
    if direction is None:
        return Pose(pose.x, pose.y, heading)
    step = speed_for(action, model)
    h = math.radians(heading)
    sin_h = math.sin(h)
    cos_h = math.cos(h)
    bx, by = direction
    # Rotate the body-frame direction into map axes (north = +y, east = +x).
    mx = bx * cos_h + by * sin_h
    my = -bx * sin_h + by * cos_h
    return Pose(pose.x + step * mx, pose.y + step * my, heading)


@dataclass(frozen=True)
class FeatureTag:
    """A labelled point dropped on the estimated map."""

    label: str
    x: float
    y: float
    tick: int


class FeatureMap:
    """Ordered collection of feature tags with per-label de-duplication.

    A new tag within ``dedup_radius`` metres of an existing tag that carries
    the same label is dropped, so revisiting a landmark does not litter the
    map.  Tags with different labels never suppress each other.
    """

    def __init__(self, dedup_radius: float = 4.0):
        if not (math.isfinite(dedup_radius) and dedup_radius >= 0):
            raise ValueError(f"dedup_radius must be finite and >= 0, got {dedup_radius!r}")
        self.dedup_radius = float(dedup_radius)
        self.tags: list[FeatureTag] = []
        self._by_label: dict[str, list[FeatureTag]] = {}

    def __len__(self) -> int:
        return len(self.tags)

    def tag_feature(self, pose: Pose, label: str, tick: int = 0,
                    projection_distance: float = 3.0) -> bool:
        """Project a detection ahead of the pose and record it.

        Labels mark things seen in front of the agent, so the tag is dropped
        ``projection_distance`` metres along the current heading.  Returns
        True if a tag was added, False if it de-duplicated away.
        """
        if label == "none":
            raise ValueError("the empty label is not a mappable feature")
        if not label:
            raise ValueError("label must be a non-empty string")
        h = math.radians(pose.heading)
        x = pose.x + projection_distance * math.sin(h)
        y = pose.y + projection_distance * math.cos(h)
        existing = self._by_label.get(label)
        if existing is not None:
            radius_sq = self.dedup_radius * self.dedup_radius
            for tag in existing:
                dx = tag.x - x
                dy = tag.y - y
                if dx * dx + dy * dy <= radius_sq:
                    return False
        tag = FeatureTag(label=label, x=x, y=y, tick=tick)
        self.tags.append(tag)
        self._by_label.setdefault(label, []).append(tag)
        return True

    def nearest_feature(self, label: str, pose: Pose) -> Optional[FeatureTag]:
        """Closest tag with the given label; ties go to the earliest tag."""
        candidates = self._by_label.get(label)
        if not candidates:
            return None
        best = None
        best_key = None
        for tag in candidates:
            dx = tag.x - pose.x
            dy = tag.y - pose.y
            key = (dx * dx + dy * dy, tag.tick)
            if best_key is None or key < best_key:
                best = tag
                best_key = key
        return best

    def labels_present(self) -> set[str]:
        return {label for label, tags in self._by_label.items() if tags}


def export_map(feature_map: FeatureMap, trajectory: Iterable[Pose]) -> dict:
    """Flatten a feature map and a pose trajectory into a plain document.

    Coordinates are rounded to six decimals (sub-micrometre, far below one
    step) so the document serialises identically on every run.
    """
    path = [[round(p.x, 6), round(p.y, 6)] for p in trajectory]
    tags = [
        {"label": t.label, "x": round(t.x, 6), "y": round(t.y, 6), "tick": t.tick}
        for t in feature_map.tags
    ]
    return {"path": path, "tags": tags}
