"""Seeded 2.5-D grid world with block terrain, animals, and task artefacts.

One cell is one square metre of terrain with a kind and an integer height;
the agent is a point mass moving in continuous coordinates on top of the
height field.  The world advances in fixed ticks (20 per second) and is a
pure function of its config seed: the same config builds the same world,
bit for bit, every time.

The observation handed to agents is deliberately narrow: an egocentric 9x9
patch of cells inside a forward field-of-view cone, the visible animals as
(species, bearing, range) triples, and the swimming flag.  Absolute
position and heading stay private to the simulator; tests read them through
:func:`World.ground_truth_pose`, which is the oracle the odometry module is
judged against.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from . import odometry
from .odometry import Pose, SpeedModel, DEFAULT_SPEEDS

# ---------------------------------------------------------------------------
# Terrain, tasks, items
# ---------------------------------------------------------------------------

GRASS = 0
WATER = 1
MOUNTAIN = 2
CAVE_ENTRANCE = 3
CAVE_INTERIOR = 4
VILLAGE_HOUSE = 5
VILLAGE_PATH = 6
PLACED_BLOCK = 7
UNKNOWN = 8  # only ever appears in observations, for cells outside the view cone

TERRAIN_NAMES = (
    "grass", "water", "mountain", "cave_entrance", "cave_interior",
    "village_house", "village_path", "placed_block", "unknown",
)

TASKS = ("FindCave", "MakeWaterfall", "CreateVillageAnimalPen", "BuildVillageHouse")

SPECIES = ("pig", "horse", "cow", "sheep", "chicken")

EMPTY_HAND = "empty_hand"
ITEM_BLOCKS = "blocks"
ITEM_WATER_BUCKET = "water_bucket"
ITEM_SNOWBALL = "snowball"
FOOD_ITEMS = tuple(f"food_{s}" for s in SPECIES)
ITEMS = (ITEM_BLOCKS, ITEM_WATER_BUCKET, ITEM_SNOWBALL) + FOOD_ITEMS

# Field of view and interaction geometry (metres / degrees).
FOV_HALF_ANGLE = 60.0
ENTITY_VIEW_RANGE = 16.0
PATCH_RADIUS = 4  # observation patch is (2r+1) x (2r+1) = 9 x 9

LURE_RADIUS = 6.0
LURE_STEP = 0.15
LURE_STANDOFF = 0.3

WATERFALL_MIN_HEIGHT = 2
WATERFALL_MIN_PITCH = 45.0

# Cells the animals treat as walls.  The agent only cares about heights,
# except for village houses which nobody may enter.
ANIMAL_SOLID = (MOUNTAIN, VILLAGE_HOUSE, PLACED_BLOCK)

_PEN_MAX_AREA = 200
_PEN_MIN_WALL = 8


class WorldError(ValueError):
    """Raised for invalid configs or impossible feature placement."""


class EpisodeOver(RuntimeError):
    """Raised when stepping a terminated world."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Everything needed to rebuild a world: seed, size, feature counts."""

    seed: int
    side_length: int = 64
    caves: int = 3
    water_bodies: int = 3
    mountains: int = 2
    villages: int = 1
    open_flats: int = 3
    animals: int = 8
    task: str = "FindCave"
    max_ticks: int = 3000

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2 ** 63:
            raise WorldError(f"seed must be an integer in [0, 2**63), got {self.seed!r}")
        if self.side_length < 32:
            raise WorldError(f"side_length must be >= 32, got {self.side_length}")
        for name in ("caves", "water_bodies", "mountains", "villages", "open_flats", "animals"):
            if getattr(self, name) < 0:
                raise WorldError(f"{name} must be >= 0")
        if self.task not in TASKS:
            raise WorldError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.max_ticks < 1:
            raise WorldError("max_ticks must be >= 1")
        needs = _TASK_REQUIREMENTS[self.task]
        for name, minimum in needs.items():
            if getattr(self, name) < minimum:
                raise WorldError(
                    f"task {self.task} needs {name} >= {minimum}, config has {getattr(self, name)}"
                )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "side_length": self.side_length,
            "caves": self.caves,
            "water_bodies": self.water_bodies,
            "mountains": self.mountains,
            "villages": self.villages,
            "open_flats": self.open_flats,
            "animals": self.animals,
            "task": self.task,
            "max_ticks": self.max_ticks,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        return cls(**data)


_TASK_REQUIREMENTS = {
    "FindCave": {"caves": 1},
    "MakeWaterfall": {"mountains": 1},
    "CreateVillageAnimalPen": {"villages": 1, "animals": 2, "open_flats": 1},
    "BuildVillageHouse": {"villages": 1, "open_flats": 1},
}


@dataclass(frozen=True)
class ActionFrame:
    """One tick worth of input: held keys, camera deltas, item actions.

    ``equip`` is None for "leave the held item alone"; use ``empty_hand``
    to stow it.  Camera deltas are degrees applied this tick.
    """

    forward: bool = False
    back: bool = False
    left: bool = False
    right: bool = False
    jump: bool = False
    sprint: bool = False
    camera_yaw_delta: float = 0.0
    camera_pitch_delta: float = 0.0
    use_item: bool = False
    place_block: bool = False
    throw_snowball: bool = False
    equip: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.camera_yaw_delta) or abs(self.camera_yaw_delta) > 180.0:
            raise ValueError(f"camera_yaw_delta must be finite in [-180, 180], got {self.camera_yaw_delta!r}")
        if not math.isfinite(self.camera_pitch_delta) or abs(self.camera_pitch_delta) > 90.0:
            raise ValueError(f"camera_pitch_delta must be finite in [-90, 90], got {self.camera_pitch_delta!r}")
        if self.equip is not None and self.equip != EMPTY_HAND and self.equip not in ITEMS:
            raise ValueError(f"unknown item {self.equip!r}")


_FLAG_FIELDS = ("forward", "back", "left", "right", "jump", "sprint",
                "use_item", "place_block", "throw_snowball")


def action_to_record(action: ActionFrame) -> str:
    """Encode an action frame as one stable text token (pipe separated)."""
    bits = 0
    for i, name in enumerate(_FLAG_FIELDS):
        if getattr(action, name):
            bits |= 1 << i
    equip = "-" if action.equip is None else action.equip
    return f"{bits}|{action.camera_yaw_delta!r}|{action.camera_pitch_delta!r}|{equip}"


def action_from_record(token: str) -> ActionFrame:
    parts = token.split("|")
    if len(parts) != 4:
        raise ValueError(f"bad action record {token!r}")
    bits = int(parts[0])
    flags = {name: bool(bits >> i & 1) for i, name in enumerate(_FLAG_FIELDS)}
    equip = None if parts[3] == "-" else parts[3]
    return ActionFrame(camera_yaw_delta=float(parts[1]), camera_pitch_delta=float(parts[2]),
                       equip=equip, **flags)


@dataclass
class Entity:
    """A roaming animal.  Lured animals trail the agent while its food is out."""

    species: str
    x: float
    y: float
    lured: bool = False


@dataclass
class AgentBody:
    x: float
    y: float
    heading: float = 0.0
    pitch: float = 0.0
    equipped: Optional[str] = None
    swimming: bool = False
    inventory: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Observation:
    """Egocentric view: 9x9 patch (rotated so ahead is row 0), entities, flags.

    ``kinds``/``heights`` are indexed [row, col] with row 0 the farthest
    visible rank in front of the agent and column 4 straight ahead.  Cells
    outside the view cone read UNKNOWN / height 0.  Entities are
    (species, bearing_degrees, range_metres) with bearing relative to the
    current heading, positive clockwise.
    """

    kinds: np.ndarray
    heights: np.ndarray
    entities: tuple
    swimming: bool
    pitch: float


@dataclass(frozen=True)
class EpisodeOutcome:
    terminated_by_snowball: bool
    ticks_elapsed: int
    task_predicates: dict

    def to_dict(self) -> dict:
        return {
            "terminated_by_snowball": self.terminated_by_snowball,
            "ticks_elapsed": self.ticks_elapsed,
            "task_predicates": dict(self.task_predicates),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeOutcome":
        return cls(bool(data["terminated_by_snowball"]), int(data["ticks_elapsed"]),
                   dict(data["task_predicates"]))


PRIMARY_PREDICATE = {
    "FindCave": "inside_cave_at_end",
    "MakeWaterfall": "waterfall_placed",
    "CreateVillageAnimalPen": "pen_with_animals",
    "BuildVillageHouse": "house_built",
}

# 8-sector compass offsets, index = round(heading / 45) % 8.
_SECTOR_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


# ---------------------------------------------------------------------------
# The world itself
# ---------------------------------------------------------------------------


class World:
    def __init__(self, config: WorldConfig):
        config.validate()
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        side = config.side_length

        # Rough capacity check before we burn attempts on rejection sampling.
        demand = (config.caves * 49 + config.water_bodies * 81 + config.mountains * 289
                  + config.villages * 256 + config.open_flats * 256 + config.animals * 2)
        if demand > 0.6 * side * side:
            raise WorldError(
                f"feature demand ({demand} cells) does not fit a side={side} world"
            )

        self.kinds = np.full((side, side), GRASS, dtype=np.int8)
        self.heights = np.ones((side, side), dtype=np.int16)
        self._reserved = np.zeros((side, side), dtype=bool)

        self.spawn_x = side // 2 + 0.5
        self.spawn_y = side // 2 + 0.5
        self._reserve_box(side // 2 - 2, side // 2 - 2, 5, 5)

        self.flat_centers: list[tuple[float, float]] = []
        self.village_centers: list[tuple[float, float]] = []
        self.summits: list[tuple[float, float, int]] = []
        self.cave_entrances: list[tuple[float, float]] = []
        self.cave_interiors: list[tuple[float, float]] = []
        self.entities: list[Entity] = []
        self.waterfalls: list[tuple[int, int]] = []

        self._place_flats()
        self._place_villages()
        self._place_mountains()
        self._place_caves()
        self._place_water()
        self._place_animals()

        self.body = AgentBody(
            x=self.spawn_x, y=self.spawn_y, heading=0.0, pitch=0.0,
            inventory={ITEM_BLOCKS: 64, ITEM_WATER_BUCKET: 1, ITEM_SNOWBALL: 1,
                       **{item: 8 for item in FOOD_ITEMS}},
        )
        self.speeds: SpeedModel = DEFAULT_SPEEDS
        self.ticks = 0
        self.terminated = False
        self.outcome: Optional[EpisodeOutcome] = None
        self.last_blocked = False

        self._summit_arr = np.array([(x, y) for x, y, _ in self.summits], dtype=float).reshape(-1, 2)
        self._cave_arr = np.array(self.cave_entrances, dtype=float).reshape(-1, 2)
        self._big_water_arr = self._find_big_water()
        self._rebuild_terrain_caches()
        self.digest = self._compute_digest()

    # -- generation ---------------------------------------------------------

    def _reserve_box(self, cx, cy, w, h):
        self._reserved[max(cx, 0):cx + w, max(cy, 0):cy + h] = True

    def _find_spot(self, size: int, what: str) -> tuple[int, int]:
        """Random top-left corner of a size x size all-grass unreserved box."""
        side = self.config.side_length
        for _ in range(400):
            cx = int(self._rng.integers(1, side - size - 1))
            cy = int(self._rng.integers(1, side - size - 1))
            region_r = self._reserved[cx:cx + size, cy:cy + size]
            region_k = self.kinds[cx:cx + size, cy:cy + size]
            if not region_r.any() and (region_k == GRASS).all():
                return cx, cy
        raise WorldError(f"could not place {what} (size {size}) in side={side} world "
                         f"with seed {self.config.seed}")

    def _place_flats(self):
        for _ in range(self.config.open_flats):
            cx, cy = self._find_spot(14, "open flat")
            self._reserve_box(cx, cy, 14, 14)
            self.flat_centers.append((cx + 7.0, cy + 7.0))

    def _place_villages(self):
        for _ in range(self.config.villages):
            cx, cy = self._find_spot(14, "village")
            self._reserve_box(cx, cy, 14, 14)
            # Three 2x2 houses around a path crossing.
            for ox, oy in ((2, 2), (9, 2), (2, 9)):
                self.kinds[cx + ox:cx + ox + 2, cy + oy:cy + oy + 2] = VILLAGE_HOUSE
                self.heights[cx + ox:cx + ox + 2, cy + oy:cy + oy + 2] = 3
            self.kinds[cx + 6:cx + 8, cy:cy + 14] = VILLAGE_PATH
            self.kinds[cx:cx + 14, cy + 6:cy + 8] = VILLAGE_PATH
            self.village_centers.append((cx + 7.0, cy + 7.0))

    def _place_mountains(self):
        side = self.config.side_length
        for _ in range(self.config.mountains):
            peak = int(self._rng.integers(5, 9))      # summit height 5..8
            radius = peak - 1                         # slope drops 1 per ring down to 2
            size = 2 * radius + 1
            cx, cy = self._find_spot(size, "mountain")
            self._reserve_box(cx, cy, size, size)
            mx, my = cx + radius, cy + radius
            xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
            dist = np.sqrt((xs - radius) ** 2 + (ys - radius) ** 2)
            cone = np.maximum(peak - np.round(dist).astype(int), 0)
            mask = cone >= 2
            block = self.heights[cx:cx + size, cy:cy + size]
            block[mask] = cone[mask]
            self.kinds[cx:cx + size, cy:cy + size][mask] = MOUNTAIN
            self.summits.append((mx + 0.5, my + 0.5, peak))

    def _place_caves(self):
        for _ in range(self.config.caves):
            size = 7
            cx, cy = self._find_spot(size, "cave")
            self._reserve_box(cx, cy, size, size)
            centre = 3
            xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
            dist = np.maximum(np.abs(xs - centre), np.abs(ys - centre))
            block_k = self.kinds[cx:cx + size, cy:cy + size]
            block_h = self.heights[cx:cx + size, cy:cy + size]
            block_k[dist <= 1] = CAVE_INTERIOR
            block_h[dist <= 1] = 0
            block_k[dist == 2] = MOUNTAIN
            block_h[dist == 2] = 3
            # Entrance gap faces the spawn so caves tend to be approachable.
            gx = centre + (2 if self.spawn_x > cx + centre else -2)
            gy = centre
            block_k[gx, gy] = CAVE_ENTRANCE
            block_h[gx, gy] = 0
            self.cave_entrances.append((cx + gx + 0.5, cy + gy + 0.5))
            self.cave_interiors.append((cx + centre + 0.5, cy + centre + 0.5))

    def _place_water(self):
        for _ in range(self.config.water_bodies):
            rx = int(self._rng.integers(2, 5))
            ry = int(self._rng.integers(2, 5))
            size_x, size_y = 2 * rx + 1, 2 * ry + 1
            size = max(size_x, size_y)
            cx, cy = self._find_spot(size, "water body")
            self._reserve_box(cx, cy, size, size)
            xs, ys = np.meshgrid(np.arange(size_x), np.arange(size_y), indexing="ij")
            inside = ((xs - rx) / rx) ** 2 + ((ys - ry) / ry) ** 2 <= 1.0
            self.kinds[cx:cx + size_x, cy:cy + size_y][inside] = WATER
            self.heights[cx:cx + size_x, cy:cy + size_y][inside] = 0

    def _place_animals(self):
        side = self.config.side_length
        count = self.config.animals
        # Species come in pairs so pen tasks always have a herd to gather.
        species_seq = []
        while len(species_seq) < count:
            s = SPECIES[int(self._rng.integers(0, len(SPECIES)))]
            species_seq.extend([s, s])
        species_seq = species_seq[:count]
        anchor = self.village_centers[0] if self.village_centers else (self.spawn_x, self.spawn_y)
        for species in species_seq:
            for _ in range(400):
                cx = int(np.clip(anchor[0] + self._rng.integers(-12, 13), 1, side - 2))
                cy = int(np.clip(anchor[1] + self._rng.integers(-12, 13), 1, side - 2))
                if self.kinds[cx, cy] in (GRASS, VILLAGE_PATH):
                    jitter = self._rng.uniform(-0.3, 0.3, size=2)
                    self.entities.append(Entity(species, cx + 0.5 + jitter[0], cy + 0.5 + jitter[1]))
                    break
            else:
                raise WorldError("could not place an animal on passable ground")

    def _find_big_water(self) -> np.ndarray:
        """Cells of water bodies that contain at least one full 3x3 square."""
        water = self.kinds == WATER
        if not water.any():
            return np.zeros((0, 2))
        core = ndimage.binary_erosion(water, structure=np.ones((3, 3)))
        labels, n = ndimage.label(water)
        big = np.zeros_like(water)
        for idx in range(1, n + 1):
            if core[labels == idx].any():
                big |= labels == idx
        xs, ys = np.nonzero(big)
        return np.stack([xs + 0.5, ys + 0.5], axis=1)

    def _compute_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kinds.tobytes())
        h.update(self.heights.tobytes())
        for e in self.entities:
            h.update(f"{e.species}:{e.x!r}:{e.y!r}".encode())
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    # -- caches rebuilt when terrain changes ---------------------------------

    def _rebuild_terrain_caches(self):
        r = PATCH_RADIUS
        self._padded_kinds = np.pad(self.kinds, r, constant_values=UNKNOWN)
        self._padded_heights = np.pad(self.heights, r, constant_values=0)
        self._rebuild_flat_anchors()
        self._rebuild_structures()

    def _rebuild_flat_anchors(self):
        """Centres of 6x6 windows that are entirely flat walkable ground."""
        side = self.config.side_length
        walkable = (self.kinds == GRASS) | (self.kinds == VILLAGE_PATH)
        if side < 6:
            self._flat_anchor_arr = np.zeros((0, 2))
            return
        win_ok = np.lib.stride_tricks.sliding_window_view(walkable, (6, 6)).all(axis=(2, 3))
        h = np.lib.stride_tricks.sliding_window_view(self.heights, (6, 6))
        win_flat = h.max(axis=(2, 3)) == h.min(axis=(2, 3))
        anchors = np.nonzero(win_ok & win_flat)
        # Window [i:i+6, j:j+6] spans x in [i, i+6); its centre is i+3.
        self._flat_anchor_arr = np.stack([anchors[0] + 3.0, anchors[1] + 3.0], axis=1)

    def _rebuild_structures(self):
        """Re-derive built artefacts (pens, houses) from the terrain."""
        self._pen_id_grid, self._pen_regions = self._find_pens()
        self._house_cells = self._find_houses()

    def _find_pens(self):
        """Enclosed pockets of animal-passable ground walled by placed blocks.

        A pocket counts as a pen when it does not touch the world border,
        is small, and is fenced by enough placed blocks that it is clearly
        built rather than natural.
        """
        passable = ~np.isin(self.kinds, ANIMAL_SOLID)
        labels, n = ndimage.label(passable)
        if n == 0:
            return labels, []
        placed = self.kinds == PLACED_BLOCK
        regions = []
        border = np.zeros_like(passable)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        border_ids = set(np.unique(labels[border & passable]).tolist())
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        for idx in range(1, n + 1):
            if idx in border_ids or sizes[idx - 1] > _PEN_MAX_AREA:
                continue
            mask = labels == idx
            ring = ndimage.binary_dilation(mask) & ~mask
            if (ring & placed).sum() >= _PEN_MIN_WALL:
                xs, ys = np.nonzero(mask)
                regions.append({"id": idx, "cells": np.stack([xs + 0.5, ys + 0.5], axis=1)})
        return labels, regions

    def _find_houses(self) -> np.ndarray:
        """Cells of any 5x5 ring of placed blocks with >= 15 of 16 wall cells."""
        placed = (self.kinds == PLACED_BLOCK).astype(np.int32)
        side = self.config.side_length
        if placed.sum() < 12 or side < 5:
            return np.zeros((0, 2))
        win = np.lib.stride_tricks.sliding_window_view(placed, (5, 5))
        total = win.sum(axis=(2, 3))
        inner = win[:, :, 1:4, 1:4].sum(axis=(2, 3))
        ring = total - inner
        hits = np.nonzero(ring >= 15)
        cells = []
        for i, j in zip(*hits):
            for u in range(5):
                for v in range(5):
                    if u in (0, 4) or v in (0, 4):
                        cells.append((i + u + 0.5, j + v + 0.5))
        return np.array(cells, dtype=float).reshape(-1, 2)

    # -- queries -------------------------------------------------------------

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x)), int(math.floor(y))

    def agent_cell(self) -> tuple[int, int]:
        return self.cell_of(self.body.x, self.body.y)

    def agent_height(self) -> int:
        cx, cy = self.agent_cell()
        return int(self.heights[cx, cy])

    def ground_truth_pose(self) -> Pose:
        """Spawn-relative true pose.  Test/oracle access only: agents never see it."""
        return Pose(self.body.x - self.spawn_x, self.body.y - self.spawn_y, self.body.heading)

    def in_fov(self, points: np.ndarray, max_range: float,
               half_angle: float = FOV_HALF_ANGLE, min_range: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the view cone at the given ranges."""
        if points.size == 0:
            return np.zeros(0, dtype=bool)
        dx = points[:, 0] - self.body.x
        dy = points[:, 1] - self.body.y
        dist = np.hypot(dx, dy)
        bearing = np.degrees(np.arctan2(dx, dy))
        rel = (bearing - self.body.heading + 180.0) % 360.0 - 180.0
        return (dist >= min_range) & (dist <= max_range) & (np.abs(rel) <= half_angle)

    def neighbourhood(self, radius: int) -> tuple[np.ndarray, np.ndarray]:
        """(kinds, heights) block of side 2r+1 centred on the agent, padded."""
        cx, cy = self.agent_cell()
        p = PATCH_RADIUS
        if radius > p:
            raise ValueError("radius exceeds padding")
        lo = p - radius
        hi = p + radius + 1
        k = self._padded_kinds[cx + lo:cx + hi, cy + lo:cy + hi]
        h = self._padded_heights[cx + lo:cx + hi, cy + lo:cy + hi]
        return k, h

    def pens_with_animals(self, min_same_species: int = 1) -> list[dict]:
        """Pens holding at least min_same_species animals of one species."""
        out = []
        for region in self._pen_regions:
            counts: dict[str, int] = {}
            for e in self.entities:
                cx, cy = self.cell_of(e.x, e.y)
                if self._pen_id_grid[cx, cy] == region["id"]:
                    counts[e.species] = counts.get(e.species, 0) + 1
            if counts and max(counts.values()) >= min_same_species:
                out.append(region)
        return out

    def agent_pen_region(self) -> Optional[dict]:
        cx, cy = self.agent_cell()
        pen_id = self._pen_id_grid[cx, cy]
        for region in self._pen_regions:
            if region["id"] == pen_id:
                return region
        return None

    def task_predicates(self) -> dict:
        cx, cy = self.agent_cell()
        pens = self.pens_with_animals(min_same_species=2)
        return {
            "inside_cave_at_end": bool(self.kinds[cx, cy] == CAVE_INTERIOR),
            "waterfall_placed": bool(self.waterfalls),
            "pen_with_animals": bool(pens),
            "house_built": bool(self._house_cells.size),
        }

    # -- stepping ------------------------------------------------------------

    def _passable(self, from_cell, to_cell, jump: bool) -> bool:
        tx, ty = to_cell
        if self.kinds[tx, ty] == VILLAGE_HOUSE:
            return False
        rise = int(self.heights[tx, ty]) - int(self.heights[from_cell])
        if rise >= 2:
            return False
        if rise == 1 and not jump:
            return False
        return True

    def step(self, action: ActionFrame, build_observation: bool = True):
        """Advance one tick.  Returns (observation or None, list of events)."""
        if self.terminated:
            raise EpisodeOver("episode already terminated")
        events: list[str] = []
        body = self.body
        side = self.config.side_length

        # Equip changes take effect before anything else this tick.
        if action.equip is not None:
            if action.equip == EMPTY_HAND:
                body.equipped = None
            elif body.inventory.get(action.equip, 0) > 0:
                body.equipped = action.equip
            else:
                events.append("equip_missing")

        # Kinematics run through the same update the odometry module uses,
        # so unobstructed motion matches the estimator bit for bit.
        before = Pose(body.x, body.y, body.heading)
        proposed = odometry.update(before, action, self.speeds)
        body.heading = proposed.heading
        body.pitch = float(np.clip(body.pitch + action.camera_pitch_delta, -90.0, 90.0))
        nx, ny = proposed.x, proposed.y
        if (nx, ny) != (before.x, before.y):
            if body.swimming:
                # Water caps every gait at walking pace.
                step = odometry.speed_for(action, self.speeds)
                if step > self.speeds.walk:
                    scale = self.speeds.walk / step
                    nx = before.x + (nx - before.x) * scale
                    ny = before.y + (ny - before.y) * scale
            blocked = False
            if not (0.0 <= nx < side and 0.0 <= ny < side):
                blocked = True
            else:
                from_cell = self.cell_of(before.x, before.y)
                to_cell = self.cell_of(nx, ny)
                if to_cell != from_cell and not self._passable(from_cell, to_cell, action.jump):
                    blocked = True
            if blocked:
                events.append("blocked")
                self.last_blocked = True
            else:
                body.x, body.y = nx, ny
                self.last_blocked = False
        else:
            self.last_blocked = False
        cx, cy = self.agent_cell()
        body.swimming = bool(self.kinds[cx, cy] == WATER)

        self._step_animals()

        if action.place_block:
            events.extend(self._do_place_block())
        if action.use_item:
            events.extend(self._do_use_item())

        self.ticks += 1
        if action.throw_snowball:
            if body.inventory.get(ITEM_SNOWBALL, 0) > 0:
                body.inventory[ITEM_SNOWBALL] -= 1
            self.terminated = True
            self.outcome = EpisodeOutcome(True, self.ticks, self.task_predicates())
            events.append("snowball_thrown")
        elif self.ticks >= self.config.max_ticks:
            self.terminated = True
            self.outcome = EpisodeOutcome(False, self.ticks, self.task_predicates())
            events.append("tick_limit")

        obs = self.observe() if build_observation else None
        return obs, events

    def _step_animals(self):
        body = self.body
        food = body.equipped if body.equipped in FOOD_ITEMS else None
        species_fed = food[len("food_"):] if food else None
        for e in self.entities:
            dx = body.x - e.x
            dy = body.y - e.y
            dist = math.hypot(dx, dy)
            if species_fed == e.species and not e.lured and dist <= LURE_RADIUS:
                e.lured = True
            if not (e.lured and species_fed == e.species):
                continue
            if dist <= LURE_STANDOFF or dist <= 1e-9:
                continue
            step = min(LURE_STEP, dist - LURE_STANDOFF)
            nx = e.x + dx / dist * step
            ny = e.y + dy / dist * step
            if self._animal_can_stand(nx, ny):
                e.x, e.y = nx, ny
            elif self._animal_can_stand(nx, e.y):
                e.x = nx
            elif self._animal_can_stand(e.x, ny):
                e.y = ny

    def _animal_can_stand(self, x: float, y: float) -> bool:
        side = self.config.side_length
        if not (0.0 <= x < side and 0.0 <= y < side):
            return False
        cx, cy = self.cell_of(x, y)
        return self.kinds[cx, cy] not in ANIMAL_SOLID

    def _facing_cell(self) -> tuple[int, int]:
        sector = int(round(self.body.heading / 45.0)) % 8
        ox, oy = _SECTOR_OFFSETS[sector]
        cx, cy = self.agent_cell()
        return cx + ox, cy + oy

    def _do_place_block(self) -> list[str]:
        body = self.body
        if body.inventory.get(ITEM_BLOCKS, 0) <= 0:
            return ["inventory_empty"]
        tx, ty = self._facing_cell()
        side = self.config.side_length
        if not (0 <= tx < side and 0 <= ty < side):
            return ["place_out_of_bounds"]
        if self.kinds[tx, ty] == VILLAGE_HOUSE:
            return ["place_refused"]
        cx, cy = self.agent_cell()
        self.kinds[tx, ty] = PLACED_BLOCK
        self.heights[tx, ty] = self.heights[cx, cy] + 1
        body.inventory[ITEM_BLOCKS] -= 1
        self._rebuild_terrain_caches()
        return ["placed_block"]

    def _do_use_item(self) -> list[str]:
        body = self.body
        if body.equipped != ITEM_WATER_BUCKET:
            return ["use_noop"]
        if body.inventory.get(ITEM_WATER_BUCKET, 0) <= 0:
            return ["use_noop"]
        if body.pitch < WATERFALL_MIN_PITCH or self.agent_height() < WATERFALL_MIN_HEIGHT:
            return ["bucket_refused"]
        body.inventory[ITEM_WATER_BUCKET] -= 1
        self.waterfalls.append(self.agent_cell())
        return ["waterfall_placed"]

    def finalize(self) -> EpisodeOutcome:
        """Terminate without a snowball (driver-imposed tick cap)."""
        if not self.terminated:
            self.terminated = True
            self.outcome = EpisodeOutcome(False, self.ticks, self.task_predicates())
        assert self.outcome is not None
        return self.outcome

    # -- observation ---------------------------------------------------------

    _PATCH_OFF = np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)

    def observe(self) -> Observation:
        body = self.body
        cx, cy = self.agent_cell()
        r = PATCH_RADIUS
        kinds = self._padded_kinds[cx:cx + 2 * r + 1, cy:cy + 2 * r + 1]
        heights = self._padded_heights[cx:cx + 2 * r + 1, cy:cy + 2 * r + 1]

        # Visibility mask in world axes: cell centre within the view cone.
        centres_x = (cx + self._PATCH_OFF + 0.5)[:, None] - body.x
        centres_y = (cy + self._PATCH_OFF + 0.5)[None, :] - body.y
        bearing = np.degrees(np.arctan2(centres_x, centres_y))
        rel = (bearing - body.heading + 180.0) % 360.0 - 180.0
        visible = np.abs(rel) <= FOV_HALF_ANGLE
        visible[r, r] = True
        kinds = np.where(visible, kinds, UNKNOWN).astype(np.int8)
        heights = np.where(visible, heights, 0).astype(np.int16)

        # Rotate into the egocentric frame by the nearest quarter turn.
        # Axis 0 is x (east), axis 1 is y (north).  After the transforms
        # below, row 0 is the farthest rank ahead and column 4 is dead ahead.
        quarter = int(round(body.heading / 90.0)) % 4
        kinds = _egocentric(kinds, quarter)
        heights = _egocentric(heights, quarter)

        seen = []
        for e in self.entities:
            dx = e.x - body.x
            dy = e.y - body.y
            dist = math.hypot(dx, dy)
            if dist > ENTITY_VIEW_RANGE:
                continue
            rel_b = (math.degrees(math.atan2(dx, dy)) - body.heading + 180.0) % 360.0 - 180.0
            if abs(rel_b) <= FOV_HALF_ANGLE:
                seen.append((e.species, rel_b, dist))
        seen.sort(key=lambda t: t[2])
        return Observation(kinds=kinds, heights=heights, entities=tuple(seen),
                           swimming=body.swimming, pitch=body.pitch)


def _egocentric(patch: np.ndarray, quarter: int) -> np.ndarray:
    """Rotate a world-aligned (x, y)-indexed patch so 'ahead' is row 0, col mid.

    With heading north (quarter 0) the agent looks along +y, which is axis 1
    ascending; we want ahead along axis 0 descending with west on the left.
    Each extra quarter turn of heading rotates the world a quarter turn the
    other way in the egocentric frame.
    """
    # Convert (x=east, y=north) to (row=north-to-south, col=west-to-east).
    rows = patch.T[::-1, :]
    return np.rot90(rows, k=quarter) if quarter else rows


def generate_world(config: WorldConfig) -> World:
    """Build the deterministic world described by the config."""
    return World(config)


def reachable_cells(world: World) -> np.ndarray:
    """Flood-fill oracle: cells reachable from spawn by walking and jumping.

    Moves between 4-neighbours are allowed when the destination is not a
    house and rises at most one block.  Used by tests to decide whether a
    task feature can be reached at all; the live agents never see it.
    """
    side = world.config.side_length
    heights = world.heights
    blocked = world.kinds == VILLAGE_HOUSE
    reach = np.zeros((side, side), dtype=bool)
    start = world.cell_of(world.spawn_x, world.spawn_y)
    stack = [start]
    reach[start] = True
    while stack:
        cx, cy = stack.pop()
        h = heights[cx, cy]
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if not (0 <= nx < side and 0 <= ny < side):
                continue
            if reach[nx, ny] or blocked[nx, ny]:
                continue
            if heights[nx, ny] - h >= 2:
                continue
            reach[nx, ny] = True
            stack.append((nx, ny))
    return reach
