"""Authoring and playback of fixed build scripts.

The building subtasks (pen, house, waterfall tower) replay pre-authored
sequences of control frames from text fixtures instead of planning at run
time.  Scripts are authored in a local frame: the agent is assumed to
start at the centre of a cell facing exactly along a grid axis, and every
walk segment is emitted by simulating the move model until the agent is
within half a step of the target cell centre.  That keeps positional error
bounded by 0.108 m regardless of segment count.

Walk frames hold jump so one-block rises never stall a script.  Fence
scripts walk the wall line backwards, placing a block into each vacated
cell; the cell the agent started from is skipped, leaving a gate.

Run ``python -m gridquest.scriptgen`` to regenerate the packaged fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import odometry
from .world import ActionFrame, action_from_record, action_to_record

SCRIPT_NAMES = ("build_pen", "build_house", "build_waterfall_tower")
_HALF_STEP = odometry.WALK_STEP / 2.0

#: Pen fence footprint (cells along one side) and the resulting wall ring.
PEN_SIDE = 8
HOUSE_SIDE = 5
TOWER_STEPS = 3

#: Where the centre of each finished structure sits in the script frame
#: (relative to the agent's aligned starting position).  Controllers use
#: this to remember where they built things.
PEN_CENTER_OFFSET = (-0.5, 4.0)
HOUSE_CENTER_OFFSET = (0.0, 2.5)


@dataclass(frozen=True)
class ActionScript:
    """A named, versioned sequence of control frames."""

    name: str
    frames: tuple

    def __len__(self) -> int:
        return len(self.frames)


class ScriptWriter:
    """Builds a frame list while tracking the simulated local pose."""

    def __init__(self):
        self.frames: list[ActionFrame] = []
        self.pose = odometry.Pose()

    def emit(self, frame: ActionFrame):
        self.frames.append(frame)
        self.pose = odometry.update(self.pose, frame)

    def turn_right_quarters(self, quarters: int):
        for _ in range(6 * quarters):
            self.emit(ActionFrame(camera_yaw_delta=15.0))

    def place(self):
        self.emit(ActionFrame(place_block=True))

    def _axis(self) -> tuple[float, float]:
        h = math.radians(self.pose.heading)
        ax, ay = math.sin(h), math.cos(h)
        if abs(round(ax) - ax) > 1e-9 or abs(round(ay) - ay) > 1e-9:
            raise ValueError("walk segments require an axis-aligned heading")
        return round(ax), round(ay)

    def walk_cells(self, n: int, backward: bool = False):
        """Advance n cell centres along the facing axis (or its reverse).

        Targets snap to the integer lattice the script started on, so the
        0.08 m per-cell overshoot of a 5-tick walk never accumulates.
        """
        ax, ay = self._axis()
        sign = -1.0 if backward else 1.0
        frame = ActionFrame(back=True, jump=True) if backward else ActionFrame(forward=True, jump=True)
        for _ in range(n):
            tx = round(self.pose.x) + sign * ax
            ty = round(self.pose.y) + sign * ay
            while (tx - self.pose.x) * sign * ax + (ty - self.pose.y) * sign * ay > _HALF_STEP:
                self.emit(frame)


def build_pen_script() -> ActionScript:
    """Fence an 8x8 ring, leaving open the gate cell the agent started on.

    The agent walks the wall line backwards and places a block into each
    cell it vacates, so it never has to turn mid-leg.  It finishes standing
    on the gate cell in the middle of the south wall, facing east.
    """
    w = ScriptWriter()
    w.turn_right_quarters(1)           # face east, travel west
    w.walk_cells(1, backward=True)     # step off the gate cell; leave it open
    for _ in range(PEN_SIDE // 2 - 1):
        w.walk_cells(1, backward=True)
        w.place()
    for _ in range(3):                 # west wall, north wall, east wall
        w.turn_right_quarters(1)
        for _ in range(PEN_SIDE - 1):
            w.walk_cells(1, backward=True)
            w.place()
    w.turn_right_quarters(1)           # back along the south wall to the gate
    for _ in range(PEN_SIDE - 1 - PEN_SIDE // 2):
        w.walk_cells(1, backward=True)
        w.place()
    return ActionScript("build_pen", tuple(w.frames))


def build_house_script() -> ActionScript:
    """Fence a 5x5 ring with one door cell open (15 of 16 wall cells)."""
    w = ScriptWriter()
    w.turn_right_quarters(1)
    w.walk_cells(1, backward=True)
    for _ in range(HOUSE_SIDE // 2 - 1):
        w.walk_cells(1, backward=True)
        w.place()
    for _ in range(3):
        w.turn_right_quarters(1)
        for _ in range(HOUSE_SIDE - 1):
            w.walk_cells(1, backward=True)
            w.place()
    w.turn_right_quarters(1)
    for _ in range(HOUSE_SIDE - 1 - HOUSE_SIDE // 2):
        w.walk_cells(1, backward=True)
        w.place()
    return ActionScript("build_house", tuple(w.frames))


def build_waterfall_tower_script() -> ActionScript:
    """Raise a three-step stair: place a block ahead, hop onto it, repeat."""
    w = ScriptWriter()
    for _ in range(TOWER_STEPS):
        w.place()
        w.walk_cells(1)
    return ActionScript("build_waterfall_tower", tuple(w.frames))


_BUILDERS = {
    "build_pen": build_pen_script,
    "build_house": build_house_script,
    "build_waterfall_tower": build_waterfall_tower_script,
}


def generate_script(name: str) -> ActionScript:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown script {name!r}") from None


def script_to_text(script: ActionScript) -> str:
    lines = [f"gridquest-script 1 name={script.name}"]
    lines.extend(action_to_record(f) for f in script.frames)
    return "\n".join(lines) + "\n"


def script_from_text(text: str) -> ActionScript:
    lines = text.strip().splitlines()
    header = lines[0].split()
    if header[:2] != ["gridquest-script", "1"]:
        raise ValueError(f"unrecognised script header {lines[0]!r}")
    name = header[2].split("=", 1)[1]
    return ActionScript(name, tuple(action_from_record(tok) for tok in lines[1:]))


def load_script(name: str) -> ActionScript:
    """Load a packaged script fixture by name."""
    text = resources.files("gridquest").joinpath(f"fixtures/{name}.txt").read_text("utf-8")
    script = script_from_text(text)
    if script.name != name:
        raise ValueError(f"fixture {name}.txt declares name {script.name!r}")
    return script


def write_fixtures(directory) -> list[str]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SCRIPT_NAMES:
        path = out / f"{name}.txt"
        path.write_text(script_to_text(generate_script(name)), encoding="utf-8")
        written.append(str(path))
    return written


def main():
    here = Path(__file__).resolve().parent / "fixtures"
    for path in write_fixtures(here):
        print(path)


if __name__ == "__main__":
    main()
