"""Task state machines, subtask controllers, and the per-tick agent loop.

Each task is a short linear chain of subtask states.  A state is left in
one of three ways: its exit label fires in the current frame's label set,
its controller reports completion, or it times out (timeouts advance to
the next state rather than looping back, which keeps the chain acyclic).
A water-safety state can preempt any state and later resume it exactly
where it left off.

Four agent conditions share this machinery:

* ``Hybrid``: cloned navigation plus dead-reckoned homing toward features
  remembered on the map, with the machine on top.
* ``Engineered``: the same machine but random-walk navigation and no map
  homing.
* ``BehaviorCloning``: the cloned policy alone, no machine at all, so it
  never throws the finishing snowball.
* ``Human``: a scripted demonstrator that walks straight at true world
  coordinates with a little action noise; it stands in for a person at
  the keyboard and is the source of cloning data.

The runtime classifies the new observation, updates the dead-reckoned
pose with the previous action, tags fired labels on the map, applies
safety preemption and transitions, and only then acts, all in one tick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import odometry, scriptgen
from . import world as worldmod
from .odometry import FeatureMap, FeatureTag, Pose, wrap_relative
from .perception import StateLabelSet, featurize, oracle_labels
from .policy import (BCPolicy, DemoStep, DISCRETE_ACTIONS, GroundTruthNavigator,
                     action_to_frame, frame_to_action, sample_explorer_action)
from .world import (ActionFrame, EMPTY_HAND, EpisodeOutcome, ITEM_SNOWBALL,
                    ITEM_WATER_BUCKET, MOUNTAIN, TASKS, World)

CONDITIONS = ("Hybrid", "Engineered", "BehaviorCloning", "Human")

SUBTASK_NAMES = (
    "navigate_search",
    "go_to_feature",
    "build_waterfall_tower",
    "place_waterfall",
    "build_pen",
    "lure_animals",
    "return_to_pen",
    "build_house",
    "tour_house",
    "move_away",
    "turn_around",
    "throw_snowball_end",
    "escape_water",
)

#: Ticks a state may run before the machine force-advances past it.
STATE_TIMEOUT_TICKS = 1200
#: Hard cap on one water-escape excursion.
ESCAPE_TIMEOUT_TICKS = 900
#: Default action-noise rate for the scripted demonstrator.
HUMAN_ACTION_NOISE = 0.05

_HOMING_ARRIVE = 1.2
_AIM_TOLERANCE = 8.0
_LURE_APPROACH = 4.5


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class StateSpec:
    """One machine state: which controller runs and what label exits it."""

    name: str
    exit_label: Optional[str] = None
    goal_label: Optional[str] = None


_MACHINES = {
    "FindCave": (
        StateSpec("navigate_search", exit_label="inside_cave", goal_label="has_cave"),
        StateSpec("throw_snowball_end"),
    ),
    "MakeWaterfall": (
        StateSpec("navigate_search", exit_label="at_the_top", goal_label="has_mountain"),
        StateSpec("build_waterfall_tower"),
        StateSpec("place_waterfall"),
        StateSpec("move_away"),
        StateSpec("turn_around"),
        StateSpec("throw_snowball_end"),
    ),
    "CreateVillageAnimalPen": (
        StateSpec("navigate_search", exit_label="has_open_space"),
        StateSpec("build_pen"),
        StateSpec("go_to_feature", goal_label="has_animals"),
        StateSpec("lure_animals"),
        StateSpec("return_to_pen"),
        StateSpec("move_away"),
        StateSpec("turn_around"),
        StateSpec("throw_snowball_end"),
    ),
    "BuildVillageHouse": (
        StateSpec("navigate_search", exit_label="has_open_space"),
        StateSpec("build_house"),
        StateSpec("tour_house"),
        StateSpec("move_away"),
        StateSpec("turn_around"),
        StateSpec("throw_snowball_end"),
    ),
}


class TaskStateMachine:
    """Linear chain of states with timeout-fallback and safety preemption."""

    def __init__(self, task: str):
        if task not in _MACHINES:
            raise ControlError(f"unknown task {task!r}")
        self.task = task
        self.states = _MACHINES[task]
        self.index = 0
        self.entered_tick = 0
        self.escaping = False
        self._preempted: Optional[tuple] = None

    @property
    def current(self) -> StateSpec:
        return self.states[self.index]

    def state_names(self) -> tuple:
        return tuple(s.name for s in self.states)

    def advance(self, tick: int) -> bool:
        if self.index + 1 >= len(self.states):
            return False
        self.index += 1
        self.entered_tick = tick
        return True

    def fallback(self, tick: int) -> bool:
        """Drop back to the opening search state (livelock escape).

        Returns False for the terminal state, which may not be abandoned.
        """
        if self.current.name == "throw_snowball_end":
            return False
        self.index = 0
        self.entered_tick = tick
        return True

    def preempt(self, tick: int):
        if self.escaping:
            raise ControlError("already escaping")
        self._preempted = (self.index, self.entered_tick)
        self.escaping = True
        self.entered_tick = tick

    def resume(self, tick: int):
        """Restore the preempted state with its original clock, so time spent
        escaping still counts against that state's timeout budget."""
        if not self.escaping:
            raise ControlError("not escaping")
        self.index, self.entered_tick = self._preempted
        self.escaping = False
        self._preempted = None


def make_machine(task: str) -> TaskStateMachine:
    return TaskStateMachine(task)


# ---------------------------------------------------------------------------
# Subtask controllers
# ---------------------------------------------------------------------------


def _aim(ctx: "AgentRuntime", tx: float, ty: float,
         sprint_range: float = 8.0, careful: bool = False) -> tuple[str, float]:
    """Steer the estimated pose toward an estimated-frame point."""
    est = ctx.est
    dx, dy = tx - est.x, ty - est.y
    dist = math.hypot(dx, dy)
    rel = wrap_relative(math.degrees(math.atan2(dx, dy)) - est.heading)
    if abs(rel) > _AIM_TOLERANCE:
        return ("turn_left_15" if rel < 0 else "turn_right_15"), dist
    if not careful and (ctx.labels.facing_wall or ctx._water_ahead()):
        return "turn_right_15", dist
    if dist > sprint_range:
        return "forward_sprint_jump", dist
    return "forward_walk", dist


class SubtaskController:
    name = "controller"

    def __init__(self, ctx: "AgentRuntime", spec: StateSpec):
        self.ctx = ctx
        self.spec = spec
        self.done = False
        self.abort = False
        self._queue: list[ActionFrame] = []

    def queue_actions(self, names):
        self._queue.extend(action_to_frame(n) for n in names)

    def step(self) -> ActionFrame:
        raise NotImplementedError


#: Patch terrain codes worth steering straight at, per goal label.
# Ordered by preference: entrances are walkable gaps, interiors may sit
# behind solid rock, so aim for a visible entrance first.
_STEER_TARGETS = {
    "has_cave": (worldmod.CAVE_ENTRANCE, worldmod.CAVE_INTERIOR),
    "has_mountain": (MOUNTAIN,),
}

#: Arrival radius and per-waypoint tick budget for the sweep pattern.
_SWEEP_ARRIVE = 3.0
_SWEEP_BUDGET = 150


def _sweep_waypoints(side: int) -> list[tuple[float, float]]:
    """Square rings around the spawn point, in estimated-frame coordinates.

    Walking the rings in order passes within label-detection range of
    every part of the arena, so a search that never picks up a signal
    still covers the ground methodically instead of diffusing at random.
    """
    lim = side / 2.0 - 4.0
    points: list[tuple[float, float]] = []
    for radius in (10.0, 20.0, 28.0):
        r = min(radius, lim)
        points.extend([
            (0.0, r), (r, r), (r, 0.0), (r, -r),
            (0.0, -r), (-r, -r), (-r, 0.0), (-r, r),
        ])
    return points


class NavigateSearch(SubtaskController):
    """Exploration with optional homing toward remembered feature tags.

    Homing runs a cascade: steer at goal terrain actually visible in the
    observation patch, else walk into the live label signal, else scan in
    place if the signal was just lost, else head for the nearest
    unvisited map tag, else explore.
    """

    name = "navigate_search"
    _SCAN_WINDOW = 40

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._last_fire: Optional[int] = None
        self._follow_until = 0
        self._follow_entry = 0
        self._last_steer = -10 ** 9

    def step(self) -> ActionFrame:
        ctx = self.ctx
        if ctx.blocked_last and ctx.condition != "Human":
            # Wall contact preempts whatever walk was queued: pushing the
            # rest of a stale queue into the rock would pin the agent.  A
            # full quarter turn and a few paces per contact follow the wall
            # around instead of bouncing off it.  The ground-truth navigator
            # runs its own detours, so stay out of its way.
            self._queue.clear()
            self.queue_actions(["turn_right_15"] * 6 + ["forward_walk"] * 5)
            if (ctx.tick_index - self._last_steer <= 15
                    or ctx.tick_index < self._follow_until):
                # Blocked while closing on visible goal terrain: the goal
                # pull would cancel the detour and pin the agent in a
                # pocket, so commit to hugging the obstacle for a while.
                self._enter_follow()
            return self._queue.pop(0)
        if self._queue:
            return self._queue.pop(0)
        goal = self.spec.goal_label
        if ctx.tick_index < self._follow_until:
            if ctx.use_homing and goal == "has_cave":
                steer = self._steer_entry()
                if steer is not None:
                    # The walkable mouth is in sight: abandon the wall hug
                    # and go straight in, or the probe cycle marches past
                    # the one-cell gap again and again.
                    self._follow_until = 0
                    self._last_steer = ctx.tick_index
                    return steer
            if self._follow_done(goal):
                self._follow_until = 0
            else:
                # Probe back toward the wall, detour again on contact: the
                # right-hand rule rounds corners and finds entrance gaps.
                self.queue_actions(["turn_left_15"] * 6 + ["forward_walk"] * 5)
                return self._queue.pop(0)
        if ctx.use_homing and goal:
            steer = self._steer_to_visible(goal)
            if steer is not None:
                self._last_steer = ctx.tick_index
                return steer
            if (self.spec.exit_label == "at_the_top" and ctx.obs is not None):
                r = ctx.obs.kinds.shape[0] // 2
                if ctx.obs.kinds[r, r] == MOUNTAIN:
                    # On the slope, climbing outranks the distance signal:
                    # another summit on the horizon must not pull the agent
                    # back off the mountain it already reached.
                    return action_to_frame(self._climb(r))
            if getattr(ctx.labels, goal):
                self._last_fire = ctx.tick_index
                if ctx.labels.facing_wall:
                    return action_to_frame("turn_right_15")
                return action_to_frame("forward_walk")
            if (goal == "has_mountain" and self._last_fire is not None
                    and ctx.tick_index - self._last_fire <= 2):
                # The mountain signal has a minimum range, so losing it while
                # closing in means we crossed into the blind band: keep
                # walking the last bearing until the slope itself is visible.
                # Other signals cut out from facing, not distance, and are
                # recovered by scanning instead.
                self.queue_actions(["forward_walk"] * 30)
                return self._queue.pop(0)
            if (self._last_fire is not None
                    and ctx.tick_index - self._last_fire < self._SCAN_WINDOW):
                return action_to_frame("turn_right_15")
            tag = ctx.nearest_unvisited(goal)
            if tag is not None:
                action, dist = self._aim_following(tag.x, tag.y)
                if dist < _HOMING_ARRIVE:
                    ctx.mark_visited(tag)
                else:
                    return action_to_frame(action)
        if ctx.use_homing:
            sweep = self._sweep_step()
            if sweep is not None:
                return action_to_frame(sweep)
        return action_to_frame(self._explore())

    def _enter_follow(self) -> None:
        """Open or renew the wall-follow window, bounded per entry.

        Probing deliberately seeks wall contact, and each contact renews
        the window, so without a bound the mode never exits inside a rocky
        pocket.  The cap forces a fresh look at the cascade now and then.
        """
        tick = self.ctx.tick_index
        if tick >= self._follow_until:
            self._follow_entry = tick
        self._follow_until = min(tick + 40, self._follow_entry + 120)

    def _follow_done(self, goal: Optional[str]) -> bool:
        """True when a clean pull exists and hugging the wall should stop:
        the goal signal is live with open ground ahead, or the slope the
        search is after is already underfoot."""
        ctx = self.ctx
        if not ctx.use_homing or not goal:
            return False
        if getattr(ctx.labels, goal) and not ctx.labels.facing_wall:
            return True
        if self.spec.exit_label == "at_the_top" and ctx.obs is not None:
            r = ctx.obs.kinds.shape[0] // 2
            if ctx.obs.kinds[r, r] == MOUNTAIN:
                return True
        return False

    def _aim_following(self, tx: float, ty: float) -> tuple[str, float]:
        """Aim at a point, switching to wall-following when a wall blocks it.

        Plain aiming against a wall oscillates forever: turn toward the
        point, get the wall warning, turn away, repeat.  Committing to the
        follow mode walks along the wall and around it instead.
        """
        action, dist = _aim(self.ctx, tx, ty)
        if self.ctx.labels.facing_wall:
            self._enter_follow()
        return action, dist

    def _sweep_step(self) -> Optional[str]:
        """Head for the next ring waypoint; None once the sweep is spent.

        The waypoint list lives in runtime memory so fallbacks and safety
        preemptions resume the sweep instead of restarting it.  A stuck
        waypoint (behind rock or water) is dropped after a tick budget.
        """
        ctx = self.ctx
        sweep = ctx.memory.setdefault(
            "sweep", _sweep_waypoints(ctx.world.config.side_length))
        while sweep:
            started = ctx.memory.setdefault("sweep_started", ctx.tick_index)
            action, dist = self._aim_following(*sweep[0])
            if dist < _SWEEP_ARRIVE or ctx.tick_index - started > _SWEEP_BUDGET:
                sweep.pop(0)
                ctx.memory.pop("sweep_started", None)
                continue
            return action
        return None

    def _steer_to_visible(self, goal: str) -> Optional[ActionFrame]:
        codes = _STEER_TARGETS.get(goal)
        if codes is None or self.ctx.obs is None:
            return None
        r = self.ctx.obs.kinds.shape[0] // 2
        if MOUNTAIN in codes and self.ctx.obs.kinds[r, r] == MOUNTAIN:
            # Already standing on the slope: let the explore branch walk
            # uphill rather than milling about at the nearest slope cell.
            return None
        for code in codes:
            mask = self.ctx.obs.kinds == code
            # The cell underfoot is never a steering target: standing on an
            # entrance must hand aim over to the interior cells beyond it.
            mask[r, r] = False
            if mask.any():
                break
        else:
            return None
        return self._steer_at_mask(mask)

    def _steer_entry(self) -> Optional[ActionFrame]:
        """Steer at a cave mouth that is close enough to walk straight into.

        Entrance cells are walkable at any range; interior cells only count
        within two cells, where the line in runs through the gap rather
        than across the rock ring.
        """
        if self.ctx.obs is None:
            return None
        kinds = self.ctx.obs.kinds
        r = kinds.shape[0] // 2
        mask = kinds == worldmod.CAVE_ENTRANCE
        near = np.zeros_like(mask)
        near[r - 2:r + 3, r - 2:r + 3] = True
        mask |= (kinds == worldmod.CAVE_INTERIOR) & near
        mask[r, r] = False
        if not mask.any():
            return None
        return self._steer_at_mask(mask)

    def _steer_at_mask(self, mask: np.ndarray) -> ActionFrame:
        r = mask.shape[0] // 2
        rows, cols = np.nonzero(mask)
        fwd = r - rows
        right = cols - r
        best = int(np.argmin(fwd ** 2 + right ** 2))
        # The patch is egocentric only up to the nearest quarter turn, so
        # convert the cell angle back to a world bearing before comparing
        # with the actual heading (which moves in 15 degree steps).
        heading = self.ctx.est.heading
        quarter = int(round(heading / 90.0)) % 4
        bearing = quarter * 90.0 + math.degrees(math.atan2(right[best], fwd[best]))
        rel = wrap_relative(bearing - heading)
        if abs(rel) > 20.0:
            return action_to_frame("turn_left_15" if rel < 0 else "turn_right_15")
        if self.ctx._water_ahead():
            # Walking the line would mean swimming: round the pond edge
            # instead and let the goal pull resume on dry ground.
            return action_to_frame("turn_right_15")
        return action_to_frame("forward_walk")

    def _explore(self) -> str:
        ctx = self.ctx
        if ctx.use_homing and ctx.obs is not None:
            # Standing on a mountainside, walk uphill rather than wander.
            r = ctx.obs.heights.shape[0] // 2
            if (ctx.obs.kinds[r, r] == MOUNTAIN
                    and self.spec.exit_label == "at_the_top"):
                return self._climb(r)
        action = ctx.nav_action()
        # Wandering policies steer off walls; the ground-truth navigator has
        # its own detour logic and must be allowed to hug them (caves are
        # entered through a one-cell gap in a rock ring).
        if (ctx.condition != "Human" and ctx.labels.facing_wall
                and action.startswith("forward")):
            return "turn_right_15"
        return action

    def _climb(self, r: int) -> str:
        """Turn toward the highest climbable visible neighbour and step up.

        A rise of more than one block cannot be jumped, so such neighbours
        are skipped rather than walked into.
        """
        ctx = self.ctx
        heights = ctx.obs.heights
        here = heights[r, r]
        best = None
        best_h = here
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                h = heights[r + dr, r + dc]
                if best_h < h <= here + 1:
                    best_h = h
                    best = (dr, dc)
        if best is None:
            # Local crest: spin in place until the summit-edge label fires
            # (it needs a steep drop inside the view cone).
            return "turn_right_15"
        heading = ctx.est.heading
        quarter = int(round(heading / 90.0)) % 4
        bearing = quarter * 90.0 + math.degrees(math.atan2(best[1], -best[0]))
        rel = wrap_relative(bearing - heading)
        if abs(rel) > 20.0:
            return "turn_left_15" if rel < 0 else "turn_right_15"
        return "forward_walk"


def _best_pair(ctx: "AgentRuntime") -> Optional[tuple[str, list[tuple[float, float]]]]:
    """Tightest same-species pair of recorded animals within working range.

    Returns the species and its two points, or None when no species has
    two individuals close enough to herd into one pen.
    """
    sightings = ctx.memory.get("animal_sightings", {})
    best = None
    for species, points in sightings.items():
        near = [p for p in points
                if math.hypot(p[0] - ctx.est.x, p[1] - ctx.est.y) < 35.0]
        for i in range(len(near)):
            for j in range(i + 1, len(near)):
                d = math.hypot(near[i][0] - near[j][0],
                               near[i][1] - near[j][1])
                if d < 25.0 and (best is None or d < best[0]):
                    best = (d, species, [near[i], near[j]])
    if best is None:
        return None
    return best[1], best[2]


class GoToFeature(NavigateSearch):
    """Roam toward animals until two of one species are on record.

    A single animal in reach is not enough: the pen needs two of a kind,
    so the search keeps widening until a workable pair has been seen (or
    a budget expires and the best-known species is taken as is).
    """

    name = "go_to_feature"
    _PAIR_BUDGET = 700

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._ticks = 0

    def step(self) -> ActionFrame:
        ctx = self.ctx
        self._ticks += 1
        pair = _best_pair(ctx)
        if pair is not None:
            ctx.memory["lure_pair"] = pair
            self.done = True
            return action_to_frame("noop")
        if self._ticks > self._PAIR_BUDGET:
            sightings = ctx.memory.get("animal_sightings", {})
            if sightings:
                species = max(sightings, key=lambda s: len(sightings[s]))
                points = sorted(
                    sightings[species],
                    key=lambda p: math.hypot(p[0] - ctx.est.x,
                                             p[1] - ctx.est.y))[:2]
                ctx.memory["lure_pair"] = (species, points)
                self.done = True
                return action_to_frame("noop")
        return super().step()


def _alignment_frames(est: Pose, spawn: tuple[float, float]) -> tuple[list[ActionFrame], int]:
    """Frames snapping heading to a grid axis and the body to a cell centre.

    Returns the frame list and the resulting quarter (0 north, 1 east, 2
    south, 3 west).  Works from the estimated pose, so residual error is
    the estimator's drift plus at most ~0.11 m per axis.
    """
    frames: list[ActionFrame] = []
    quarter = int(round(est.heading / 90.0)) % 4
    delta = wrap_relative(quarter * 90.0 - est.heading)
    steps = int(round(abs(delta) / 15.0))
    turn = "turn_right_15" if delta > 0 else "turn_left_15"
    frames.extend(action_to_frame(turn) for _ in range(steps))

    off_x = (spawn[0] + est.x) % 1.0 - 0.5
    off_y = (spawn[1] + est.y) % 1.0 - 0.5
    h = math.radians(quarter * 90.0)
    fwd = (round(math.sin(h)), round(math.cos(h)))
    right = (round(math.cos(h)), -round(math.sin(h)))
    off_f = off_x * fwd[0] + off_y * fwd[1]
    off_r = off_x * right[0] + off_y * right[1]
    for _ in range(min(2, int(round(abs(off_f) / odometry.WALK_STEP)))):
        frames.append(ActionFrame(back=off_f > 0, forward=off_f < 0, jump=True))
    for _ in range(min(2, int(round(abs(off_r) / odometry.WALK_STEP)))):
        frames.append(ActionFrame(left=off_r > 0, right=off_r < 0, jump=True))
    return frames, quarter


def _quarter_axes(quarter: int) -> tuple[tuple[float, float], tuple[float, float]]:
    h = math.radians(quarter * 90.0)
    return ((round(math.sin(h)), round(math.cos(h))),
            (round(math.cos(h)), -round(math.sin(h))))


#: Terrain a ground-level build cannot stand on or straddle.  Placed blocks
# count too: a footprint overlapping an earlier structure produces a merged
# shape whose walls enclose nothing.
_BAD_SITE_KINDS = np.array([
    worldmod.WATER, MOUNTAIN, worldmod.CAVE_ENTRANCE,
    worldmod.CAVE_INTERIOR, worldmod.VILLAGE_HOUSE, worldmod.PLACED_BLOCK,
])


class ScriptPlayback(SubtaskController):
    """Aligns to the cell grid, then replays a packaged build script."""

    memory_key: Optional[str] = None
    center_offset = (0.0, 0.0)
    #: Ground builds check the terrain ahead before laying the first block.
    # The waterfall tower does not: it is built on a summit on purpose.
    check_site = False

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._align, self._quarter = _alignment_frames(ctx.est, ctx.spawn)
        self._frames = list(scriptgen.load_script(self.name).frames)
        self._idx = 0

    def _site_clear(self) -> bool:
        """No blocking terrain in the visible part of the build footprint.

        Runs after alignment, when the patch forward axis matches the build
        axis.  Only the forward wedge is observable; cells the view cone
        masks to UNKNOWN get the benefit of the doubt.
        """
        obs = self.ctx.obs
        if obs is None:
            return True
        kinds = obs.kinds
        r = kinds.shape[0] // 2
        wedge = kinds[r - 4:r, r - 2:r + 3]
        return not np.isin(wedge, _BAD_SITE_KINDS).any()

    def step(self) -> ActionFrame:
        ctx = self.ctx
        if self._align:
            return self._align.pop(0)
        if self._idx == 0 and self.check_site and not self._site_clear():
            self.abort = True
            return action_to_frame("noop")
        if self._idx == 0 and self.memory_key is not None:
            fwd, right = _quarter_axes(self._quarter)
            ox, oy = self.center_offset
            ctx.memory[self.memory_key] = {
                "origin": (ctx.est.x, ctx.est.y),
                "quarter": self._quarter,
                "center": (ctx.est.x + ox * right[0] + oy * fwd[0],
                           ctx.est.y + ox * right[1] + oy * fwd[1]),
            }
        if self._idx < len(self._frames):
            frame = self._frames[self._idx]
            self._idx += 1
            if self._idx == len(self._frames):
                self.done = True
            return frame
        self.done = True
        return action_to_frame("noop")


class BuildPen(ScriptPlayback):
    name = "build_pen"
    memory_key = "pen"
    center_offset = scriptgen.PEN_CENTER_OFFSET
    check_site = True


class BuildHouse(ScriptPlayback):
    name = "build_house"
    memory_key = "house"
    center_offset = scriptgen.HOUSE_CENTER_OFFSET
    check_site = True


class BuildWaterfallTower(ScriptPlayback):
    name = "build_waterfall_tower"
    memory_key = "tower"


class PlaceWaterfall(SubtaskController):
    """Look steeply down and empty the bucket from the raised position."""

    name = "place_waterfall"

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._queue = [
            ActionFrame(equip=ITEM_WATER_BUCKET),
            ActionFrame(camera_pitch_delta=50.0),
            ActionFrame(use_item=True),
            ActionFrame(camera_pitch_delta=-50.0),
            ActionFrame(equip=EMPTY_HAND),
        ]

    def step(self) -> ActionFrame:
        frame = self._queue.pop(0)
        if not self._queue:
            self.done = True
        return frame


def _pen_points(ctx: "AgentRuntime") -> dict:
    pen = ctx.memory.get("pen")
    if pen is None:
        here = (ctx.est.x, ctx.est.y)
        return {"gate": here, "center": here, "south": here,
                "south1": here, "quarter": 0}
    fwd, _ = _quarter_axes(pen["quarter"])
    gx, gy = pen["origin"]
    return {
        "gate": (gx, gy),
        "center": pen["center"],
        "south": (gx - 3.0 * fwd[0], gy - 3.0 * fwd[1]),
        "south1": (gx - 1.0 * fwd[0], gy - 1.0 * fwd[1]),
        "quarter": pen["quarter"],
    }


def _gateway_fix(ctx: "AgentRuntime") -> Optional[list[ActionFrame]]:
    """Frames lining the body up one cell south of the pen gateway, or None
    when the cell straight ahead already is the gap in the fence.

    Dead reckoning drifts over a long episode, so anything that must hit
    the gateway exactly trusts the view instead: the gateway reads as a
    walkable wall-row cell flanked by placed blocks.  Find it in the rows
    ahead and convert the offset into sidesteps (cells the view cone hides
    stay inconclusive and never disqualify a candidate).
    """
    obs = ctx.obs
    if obs is None:
        return None
    kinds = obs.kinds
    r = kinds.shape[0] // 2
    spot = None
    for ahead in (1, 2, 3):
        for lateral in sorted(range(-3, 4), key=abs):
            col = r + lateral
            if not (0 <= col < kinds.shape[1]):
                continue
            if kinds[r - ahead, col] != 0:
                continue
            flanks = [kinds[r - ahead, c] for c in (col - 1, col + 1)
                      if 0 <= c < kinds.shape[1]]
            if worldmod.PLACED_BLOCK not in flanks:
                continue
            if any(k != worldmod.PLACED_BLOCK and k != worldmod.UNKNOWN
                   for k in flanks):
                continue
            spot = (ahead, lateral)
            break
        if spot is not None:
            break
    if spot is None or spot == (1, 0):
        return None
    ahead, lateral = spot
    frames = []
    if lateral:
        step = {"right" if lateral > 0 else "left": True}
        frames.extend(ActionFrame(jump=True, **step)
                      for _ in range(5 * abs(lateral)))
    frames.extend(ActionFrame(forward=True, jump=True)
                  for _ in range(5 * (ahead - 1)))
    return frames


class _PacedWalker(SubtaskController):
    """Shared gait for luring: two walking ticks then a pause, so trailing
    animals (slightly slower than a walk) never fall out of lure range."""

    def on_water_escape(self) -> None:
        """Detour along the shoreline after an escape.

        Without this the controller aims straight back at the waypoint
        across the water it just climbed out of, forever.  Successive
        escapes angle the detour further so repeated contact works its way
        around the pond instead of bouncing off the same bank.
        """
        self._escapes = getattr(self, "_escapes", 0) + 1
        self.queue_actions(["forward_walk"] * 8
                           + ["turn_right_15"] * 3
                           + ["forward_walk"] * min(6 * self._escapes, 30))

    def paced(self, action: str) -> ActionFrame:
        self._beat = getattr(self, "_beat", 0) + 1
        if action.startswith("forward") and self._beat % 3 == 0:
            return action_to_frame("noop")
        return action_to_frame("forward_walk" if action.startswith("forward") else action)


class LureAnimals(_PacedWalker):
    """Equip the right food next to the animals, then lead them penward.

    A pen only counts when two animals of one species end up inside, and
    an animal starts following only while the matching food is equipped
    within lure range, so the walk back detours past a remembered second
    individual before heading for the pen.
    """

    name = "lure_animals"
    _ROUNDUP_LIMIT = 700

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._equipped = False
        self._stops: list[tuple[float, float]] = []
        self._ticks = 0

    def on_water_escape(self) -> None:
        # The waypoint proved to be across water; write it off rather than
        # march back in after it.
        if self._stops:
            self._stops.pop(0)
        super().on_water_escape()

    def step(self) -> ActionFrame:
        ctx = self.ctx
        self._ticks += 1
        if not self._equipped:
            self._equipped = True
            species, points = ctx.memory.get("lure_pair") or ("pig", [])
            ctx.memory["lure_species"] = species
            # Latching happens by proximity while the food is out, so plan
            # a stop at every recorded individual not already in reach.
            self._stops = sorted(
                (p for p in points
                 if math.hypot(p[0] - ctx.est.x, p[1] - ctx.est.y) > 5.0),
                key=lambda p: math.hypot(p[0] - ctx.est.x, p[1] - ctx.est.y))
            return ActionFrame(equip=f"food_{species}")
        if ctx.blocked_last and not self._queue:
            self.queue_actions(["turn_right_15"] * 2 + ["forward_walk"] * 2)
        if self._queue:
            return self._queue.pop(0)
        while self._stops and self._ticks <= self._ROUNDUP_LIMIT:
            stop = self._stops[0]
            if math.hypot(stop[0] - ctx.est.x, stop[1] - ctx.est.y) <= 4.0:
                self._stops.pop(0)
                continue
            action, _ = _aim(ctx, *stop, sprint_range=1e9, careful=True)
            return self.paced(action)
        target = _pen_points(ctx)["south"]
        action, dist = _aim(ctx, target[0], target[1], sprint_range=1e9, careful=True)
        if dist < 1.0:
            self.done = True
            return action_to_frame("noop")
        return self.paced(action)


class ReturnToPen(_PacedWalker):
    """Dwell on the gate until the followers bunch up, then lead them in.

    Followers walk a straight line to the agent and slide along walls, so
    heading for the centre right away strands them against the outside of
    the fence next to the gap.  Standing on the gate first pulls them onto
    the gate column; the last leg in is then wall-free for everyone.
    """

    name = "return_to_pen"
    _DWELL_LIMIT = 200
    _WAIT_LIMIT = 120

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._phase = 0
        self._dwelled = 0
        self._waited = 0
        self._fixes = 0
        self._arrived = False

    def _followers(self, reach: float) -> int:
        ctx = self.ctx
        species = ctx.memory.get("lure_species")
        if ctx.obs is None or not species:
            return 0
        return sum(1 for s, _, d in ctx.obs.entities
                   if s == species and d <= reach)

    def step(self) -> ActionFrame:
        ctx = self.ctx
        if ctx.blocked_last and not self._queue and self._phase != 1:
            self.queue_actions(["turn_right_15"] * 2 + ["forward_walk"] * 2)
        if self._queue:
            return self._queue.pop(0)
        points = _pen_points(ctx)
        if self._phase == 0:
            # Approach from one cell south and line up on the gap by sight
            # before stepping onto it: estimated coordinates are a cell or
            # so off by now, and a dwell beside the gap instead of on it
            # bunches the followers against fence, not gateway.  Once the
            # estimate says arrived, navigation is done for good; walking
            # back to the estimated point would undo any sight-based fix.
            if not self._arrived:
                action, dist = _aim(ctx, *points["south1"], sprint_range=1e9,
                                    careful=True)
                if dist >= 0.35:
                    return self.paced(action)
                self._arrived = True
            rel = wrap_relative(points["quarter"] * 90.0 - ctx.est.heading)
            if abs(rel) > _AIM_TOLERANCE:
                return action_to_frame("turn_left_15" if rel < 0 else "turn_right_15")
            fix = _gateway_fix(ctx)
            if fix is not None and self._fixes < 2:
                self._fixes += 1
                self._queue.extend(fix)
                return self._queue.pop(0)
            self._phase = 1
            self.queue_actions(["forward_walk"] * 5)
            return self._queue.pop(0)
        if self._phase == 1:
            self._dwelled += 1
            if self._followers(2.0) >= 2 or self._dwelled >= self._DWELL_LIMIT:
                self._phase = 2
            elif self._dwelled % 5 == 0:
                # Followers close in from behind: sweep the view so their
                # arrival at the gate is seen.
                return action_to_frame("turn_right_15")
            else:
                return action_to_frame("noop")
        if self._phase == 2:
            action, dist = _aim(ctx, *points["center"], sprint_range=1e9, careful=True)
            if dist < 0.9:
                self._phase = 3
            else:
                return self.paced(action)
        self._waited += 1
        if (ctx.labels.animals_inside_pen or self._followers(1.5) >= 2
                or self._waited >= self._WAIT_LIMIT):
            self.done = True
            return ActionFrame(equip=EMPTY_HAND)
        if self._waited % 5 == 0:
            return action_to_frame("turn_right_15")
        return action_to_frame("noop")


class MoveAway(SubtaskController):
    """Back off from the finished build (and close the pen gate behind)."""

    name = "move_away"
    _AWAY_DISTANCE = 8.0
    _LIMIT = 360

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._pen_mode = ctx.task == "CreateVillageAnimalPen" and "pen" in ctx.memory
        self._phase = 0
        self._ticks = 0
        self._fixes = 0
        origin = ctx.memory.get("tower", {}).get("origin") or \
            ctx.memory.get("house", {}).get("origin")
        self._origin = origin if origin is not None else (ctx.est.x, ctx.est.y)

    def step(self) -> ActionFrame:
        self._ticks += 1
        if self._ticks > self._LIMIT:
            self.done = True
            return action_to_frame("noop")
        if self._pen_mode:
            return self._pen_exit()
        return self._walk_away(self._origin)

    def _walk_away(self, origin) -> ActionFrame:
        ctx = self.ctx
        if ctx.blocked_last and not self._queue:
            self.queue_actions(["turn_right_15"] * 2 + ["forward_walk"] * 2)
        if self._queue:
            return self._queue.pop(0)
        dx = ctx.est.x - origin[0]
        dy = ctx.est.y - origin[1]
        dist = math.hypot(dx, dy)
        if dist >= self._AWAY_DISTANCE:
            self.done = True
            return action_to_frame("noop")
        if dist < 1e-6:
            return action_to_frame("forward_walk")
        away = math.degrees(math.atan2(dx, dy))
        rel = wrap_relative(away - ctx.est.heading)
        if abs(rel) > _AIM_TOLERANCE:
            return action_to_frame("turn_left_15" if rel < 0 else "turn_right_15")
        return action_to_frame("forward_walk")

    def _pen_exit(self) -> ActionFrame:
        ctx = self.ctx
        points = _pen_points(ctx)
        if (ctx.blocked_last and not self._queue
                and self._phase in (0, 3)):
            # Clipped a fence corner on the way out: sidestep rather than
            # push, but never between facing the gate and closing it.
            self.queue_actions(["turn_right_15"] * 2 + ["forward_walk"] * 2)
        if self._queue:
            frame = self._queue.pop(0)
            if not self._queue and self._phase == 2:
                self._phase = 3
            return frame
        if self._phase == 0:   # step out through the gate
            action, dist = _aim(ctx, *points["south1"], sprint_range=1e9, careful=True)
            if dist >= 0.35:
                return action_to_frame(action)
            self._phase = 1
        if self._phase == 1:   # face the gate cell and close it
            target_heading = points["quarter"] * 90.0
            rel = wrap_relative(target_heading - ctx.est.heading)
            if abs(rel) > _AIM_TOLERANCE:
                return action_to_frame("turn_left_15" if rel < 0 else "turn_right_15")
            fix = _gateway_fix(ctx)
            if fix is not None and self._fixes < 2:
                self._fixes += 1
                self._queue.extend(fix)
                return self._queue.pop(0)
            self._phase = 2
            self.queue_actions(["turn_right_15"] * 12)
            return ActionFrame(place_block=True)
        if self._phase == 3:   # walk off south, away from the pen
            action, dist = _aim(ctx, *points["south"], sprint_range=1e9, careful=True)
            self._away_ticks = getattr(self, "_away_ticks", 0) + 1
            if self._away_ticks >= 30:
                self.done = True
                return action_to_frame("noop")
            return action_to_frame("forward_walk")
        return action_to_frame("noop")



class TourHouse(SubtaskController):
    """Step inside the new house, look all the way around, and back out."""

    name = "tour_house"

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self.queue_actions(["turn_left_15"] * 6)
        self._queue.extend([ActionFrame(forward=True, jump=True)] * 10)
        self.queue_actions(["turn_right_15"] * 24)
        self._queue.extend([ActionFrame(back=True, jump=True)] * 10)

    def step(self) -> ActionFrame:
        frame = self._queue.pop(0)
        if not self._queue:
            self.done = True
        return frame


class TurnAround(SubtaskController):
    """Half turn so the final view faces what was just built."""

    name = "turn_around"

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self.queue_actions(["turn_right_15"] * 12)

    def step(self) -> ActionFrame:
        frame = self._queue.pop(0)
        if not self._queue:
            self.done = True
        return frame


class ThrowSnowball(SubtaskController):
    """Equip and throw the snowball, ending the episode."""

    name = "throw_snowball_end"

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._queue = [ActionFrame(equip=ITEM_SNOWBALL),
                       ActionFrame(throw_snowball=True)]

    def step(self) -> ActionFrame:
        if not self._queue:
            self.done = True
            return action_to_frame("noop")
        frame = self._queue.pop(0)
        if not self._queue:
            self.done = True
        return frame


class EscapeWater(SubtaskController):
    """Get out of the water (or away from it), then hand control back."""

    name = "escape_water"

    def __init__(self, ctx, spec):
        super().__init__(ctx, spec)
        self._ticks = 0
        self._clear = 0

    def step(self) -> ActionFrame:
        ctx = self.ctx
        self._ticks += 1
        swimming = ctx.obs.swimming if ctx.obs is not None else False
        if not swimming and not ctx.labels.danger_ahead:
            self._clear += 1
            if self._clear >= 3:
                self.done = True
                return action_to_frame("noop")
        else:
            self._clear = 0
        if self._queue:
            return self._queue.pop(0)
        if swimming:
            if self._ticks % 8 == 0:
                self.queue_actions(["turn_right_15"] * 2)
                return self._queue.pop(0)
            return action_to_frame("forward_walk")
        if ctx.labels.danger_ahead:
            # Rotate (always the same way) until the hazard leaves the view
            # cone; a fixed about-face can ping-pong between two ponds.
            return action_to_frame("turn_right_15")
        return action_to_frame("forward_walk")


_CONTROLLERS: dict[str, type] = {
    "navigate_search": NavigateSearch,
    "go_to_feature": GoToFeature,
    "build_waterfall_tower": BuildWaterfallTower,
    "place_waterfall": PlaceWaterfall,
    "build_pen": BuildPen,
    "lure_animals": LureAnimals,
    "return_to_pen": ReturnToPen,
    "build_house": BuildHouse,
    "tour_house": TourHouse,
    "move_away": MoveAway,
    "turn_around": TurnAround,
    "throw_snowball_end": ThrowSnowball,
    "escape_water": EscapeWater,
}


# ---------------------------------------------------------------------------
# Agent runtime
# ---------------------------------------------------------------------------


class AgentRuntime:
    """Drives one condition's agent for one episode.

    The classifier argument selects perception: None uses ground-truth
    labels straight from world geometry, otherwise the trained model runs
    on the egocentric observation.  Only the Human condition ever reads
    the true agent position (through the ground-truth navigator).
    """

    def __init__(self, world: World, condition: str, rng: np.random.Generator,
                 bc_policy: Optional[BCPolicy] = None,
                 classifier=None,
                 action_noise: Optional[float] = None,
                 bc_temperature: float = 1.0,
                 explorer_distribution: Optional[dict] = None):
        if condition not in CONDITIONS:
            raise ControlError(f"unknown condition {condition!r}")
        self.world = world
        self.task = world.config.task
        self.condition = condition
        self.rng = rng
        self.bc_policy = bc_policy
        self.classifier = classifier
        self.bc_temperature = bc_temperature
        self.explorer_distribution = explorer_distribution
        if action_noise is None:
            action_noise = HUMAN_ACTION_NOISE if condition == "Human" else 0.0
        self.action_noise = action_noise
        self.use_homing = condition == "Hybrid"

        side = world.config.side_length
        self.spawn = (side // 2 + 0.5, side // 2 + 0.5)
        self.est = Pose()
        self.map = FeatureMap()
        self.memory: dict = {}
        self.machine = None if condition == "BehaviorCloning" else make_machine(self.task)
        self.controller: Optional[SubtaskController] = None
        if self.machine is not None:
            self.controller = self._make_controller(self.machine.current)
        self._preempted_controller: Optional[SubtaskController] = None
        self._nav: Optional[GroundTruthNavigator] = None
        self._visited: set = set()
        self.obs = None
        self.labels = StateLabelSet.none_set()
        self.blocked_last = False
        self._water_contact = False
        self._label_mute_until = 0
        self.prev_frame: Optional[ActionFrame] = None
        self.tick_index = 0
        self.last_subtask = "behavior_cloning" if self.machine is None else self.machine.current.name

    # -- helpers used by controllers -----------------------------------------

    def _make_controller(self, spec: StateSpec) -> SubtaskController:
        return _CONTROLLERS[spec.name](self, spec)

    def nearest_unvisited(self, label: str) -> Optional[FeatureTag]:
        best = None
        best_d = math.inf
        for tag in self.map.tags:
            if tag.label != label or (tag.label, tag.x, tag.y) in self._visited:
                continue
            d = math.hypot(tag.x - self.est.x, tag.y - self.est.y)
            if d < best_d:
                best, best_d = tag, d
        return best

    def mark_visited(self, tag: FeatureTag):
        self._visited.add((tag.label, tag.x, tag.y))

    def nav_action(self) -> str:
        """One exploration action, with the condition's noise already mixed in.

        Noise applies here and not to scripted or queued frames: a shaky
        hand on the movement keys is plausible, corrupting a build script
        mid-placement is not.
        """
        name = self._nav_action_clean()
        if self.action_noise > 0.0 and self.rng.random() < self.action_noise:
            return DISCRETE_ACTIONS[int(self.rng.integers(0, len(DISCRETE_ACTIONS)))]
        return name

    def _nav_action_clean(self) -> str:
        if self.condition == "Human":
            return self._human_nav_action()
        if self.condition in ("Hybrid", "BehaviorCloning") and self.bc_policy is not None:
            return self.bc_policy.sample(featurize(self.obs), self.rng,
                                         self.bc_temperature)
        return sample_explorer_action(self.rng, self.explorer_distribution)

    def _human_target(self) -> tuple[float, float]:
        w = self.world
        bx, by = w.body.x, w.body.y

        def nearest(points):
            return min(points, key=lambda p: (p[0] - bx) ** 2 + (p[1] - by) ** 2)

        if self.machine is not None and self.machine.current.name == "go_to_feature":
            if w.entities:
                e = min(w.entities, key=lambda e: (e.x - bx) ** 2 + (e.y - by) ** 2)
                return (e.x, e.y)
        if self.task == "FindCave" and w.cave_interiors:
            return nearest(w.cave_interiors)
        if self.task == "MakeWaterfall" and w.summits:
            return nearest([(x, y) for x, y, _ in w.summits])
        if w.flat_centers:
            return nearest(w.flat_centers)
        return (self.spawn[0], self.spawn[1])

    def _human_nav_action(self) -> str:
        w = self.world
        target = self._human_target()
        if (self._nav is None
                or math.hypot(self._nav.goal[0] - target[0],
                              self._nav.goal[1] - target[1]) > 1.0):
            self._nav = GroundTruthNavigator(goal=target)
        if self._nav.done(w.body.x, w.body.y):
            return sample_explorer_action(self.rng)
        blocked = self.blocked_last or self._water_contact
        self._water_contact = False
        return self._nav.next_action(w.body.x, w.body.y, w.body.heading,
                                     blocked)

    def _water_ahead(self) -> bool:
        """Water in one of the observed cells directly in front of the agent.

        The danger label alone fires on pools up to eight metres out; the
        safety preemption is for imminent contact, not distant warnings, or
        every hilltop with a view of a pond would abort its build.
        """
        if self.obs is None:
            return False
        kinds = self.obs.kinds
        r = kinds.shape[0] // 2
        row = kinds[r - 1, r - 1:r + 2]
        return bool(np.any(row == worldmod.WATER))

    # -- the tick --------------------------------------------------------------

    def _classify(self, obs) -> StateLabelSet:
        if self.classifier is None:
            return oracle_labels(self.world)
        return self.classifier.predict(featurize(obs))

    def _record_sightings(self, entities) -> None:
        """Remember where animals were seen, in estimated-frame points.

        Luring two animals of one species means physically passing within
        lure range of both, so the controllers need positions of animals
        that are no longer in view.  Nearby repeats collapse onto the
        stored point to keep one entry per individual.
        """
        sightings = self.memory.setdefault("animal_sightings", {})
        for species, rel, dist in entities:
            bearing = math.radians(self.est.heading + rel)
            x = self.est.x + dist * math.sin(bearing)
            y = self.est.y + dist * math.cos(bearing)
            points = sightings.setdefault(species, [])
            for i, (px, py) in enumerate(points):
                if math.hypot(px - x, py - y) < 2.5:
                    points[i] = (x, y)
                    break
            else:
                points.append((x, y))

    def tick(self, obs, events) -> ActionFrame:
        self.obs = obs
        self.blocked_last = "blocked" in events
        self.labels = self._classify(obs)
        for name in self.labels.active():
            self.map.tag_feature(self.est, name, tick=self.tick_index)
        if (self.machine is not None and obs is not None and obs.entities
                and self.last_subtask in ("navigate_search", "go_to_feature")):
            # Sightings taken while luring would trace the followers'
            # own trail and read as extra animals later.
            self._record_sightings(obs.entities)

        if self.machine is None:
            frame = action_to_frame(self.nav_action())
            self.last_subtask = "behavior_cloning"
        else:
            frame = self._machine_frame()
        self.prev_frame = frame
        self.est = odometry.update(self.est, frame, self.world.speeds)
        self.tick_index += 1
        return frame

    def _machine_frame(self) -> ActionFrame:
        m = self.machine
        danger = (self.labels.danger_ahead and self.prev_frame is not None
                  and self.prev_frame.forward and self._water_ahead())
        swimming = self.obs is not None and self.obs.swimming
        if (not m.escaping and (swimming or danger)
                and m.current.name != "throw_snowball_end"):
            m.preempt(self.tick_index)
            self._preempted_controller = self.controller
            self.controller = EscapeWater(self, StateSpec("escape_water"))
        if m.escaping:
            timed_out = self.tick_index - m.entered_tick >= ESCAPE_TIMEOUT_TICKS
            if self.controller.done or timed_out:
                m.resume(self.tick_index)
                self.controller = self._preempted_controller
                self._preempted_controller = None
                if isinstance(self.controller, ScriptPlayback):
                    # A build script is open-loop: the escape moved the body,
                    # so replaying the remaining frames would lay blocks from
                    # the wrong pose.  Start the build over where we stand.
                    self.controller = self._make_controller(m.current)
                elif isinstance(self.controller, NavigateSearch):
                    # Back off before re-engaging the goal, otherwise the
                    # controller aims straight back into the water it just
                    # left.  The escape ends facing the clear direction, so
                    # walk it straight; turning here points at whatever
                    # hazard flanks the shoreline.
                    if self.condition == "Human":
                        self._water_contact = True
                    else:
                        self.controller.queue_actions(["forward_walk"] * 8)
                elif isinstance(self.controller, _PacedWalker):
                    self.controller.on_water_escape()
            else:
                self.last_subtask = "escape_water"
                return self.controller.step()
        if self.tick_index - m.entered_tick >= STATE_TIMEOUT_TICKS:
            if m.fallback(self.tick_index):
                self.controller = self._make_controller(m.current)
        spec = m.current
        exit_live = (spec.exit_label is not None
                     and getattr(self.labels, spec.exit_label)
                     and self.tick_index >= self._label_mute_until)
        if exit_live:
            if m.advance(self.tick_index):
                self.controller = self._make_controller(m.current)
        elif self.controller.done:
            if m.advance(self.tick_index):
                self.controller = self._make_controller(m.current)
        self.last_subtask = m.current.name
        frame = self.controller.step()
        if self.controller.abort:
            # The controller judged its own job unworkable (for example a
            # build site that turned out to be rock or water): back out to
            # searching rather than walking the rest of the state chain.
            # Retire the map tags that led here and hold the trigger label
            # down long enough to leave, or the next tick would advance
            # straight back into the same dead end.
            if m.fallback(self.tick_index):
                goal = m.current.exit_label
                if goal:
                    for tag in self.map.tags:
                        if (tag.label == goal
                                and math.hypot(tag.x - self.est.x,
                                               tag.y - self.est.y) < 12.0):
                            self.mark_visited(tag)
                self._label_mute_until = self.tick_index + 80
                self.controller = self._make_controller(m.current)
                self.controller.queue_actions(
                    ["turn_right_15"] * 6 + ["forward_walk"] * 12)
        return frame

# ---------------------------------------------------------------------------
# Episode driving
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TickRecord:
    """Everything recorded about one tick of an episode."""

    action: ActionFrame
    labels: StateLabelSet
    subtask: str
    est: Pose
    truth: Pose


@dataclass
class EpisodeResult:
    task: str
    condition: str
    records: list
    outcome: EpisodeOutcome
    feature_map: FeatureMap
    world_digest: str
    demo_steps: list


def run_episode(world: World, runtime: AgentRuntime,
                collect_demos: bool = False) -> EpisodeResult:
    """Drive the runtime against the world until the episode terminates."""
    obs = world.observe()
    events: list[str] = []
    records: list[TickRecord] = []
    demo_steps: list[DemoStep] = []
    while not world.terminated:
        frame = runtime.tick(obs, events)
        labels = runtime.labels
        subtask = runtime.last_subtask
        if collect_demos and subtask in ("navigate_search", "go_to_feature"):
            name = frame_to_action(frame)
            if name is not None:
                demo_steps.append(DemoStep(features=featurize(obs), action=name))
        obs, events = world.step(frame)
        records.append(TickRecord(action=frame, labels=labels, subtask=subtask,
                                  est=runtime.est, truth=world.ground_truth_pose()))
    assert world.outcome is not None
    return EpisodeResult(task=world.config.task, condition=runtime.condition,
                         records=records, outcome=world.outcome,
                         feature_map=runtime.map, world_digest=world.digest,
                         demo_steps=demo_steps)
