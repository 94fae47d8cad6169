import collections

import numpy as np
import pytest

from gridquest import odometry
from gridquest.world import (
    CAVE_INTERIOR,
    EpisodeOver,
    FOOD_ITEMS,
    GRASS,
    ITEM_BLOCKS,
    ITEM_SNOWBALL,
    ITEM_WATER_BUCKET,
    MOUNTAIN,
    PLACED_BLOCK,
    TASKS,
    UNKNOWN,
    VILLAGE_HOUSE,
    WATER,
    ActionFrame,
    World,
    WorldConfig,
    WorldError,
    generate_world,
    reachable_cells,
)

WALK = 0.216
SPRINT = 0.281
SPRINT_JUMP = 0.356


def flat_world(seed=11, task="FindCave", **overrides):
    config = WorldConfig(seed=seed, task=task, **overrides)
    return World(config)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_config_validation_errors():
    with pytest.raises(WorldError):
        WorldConfig(seed=-1).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=2 ** 63).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, side_length=16).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, animals=-1).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, task="DigTunnel").validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, max_ticks=0).validate()
    # Each task insists on the features it needs.
    with pytest.raises(WorldError):
        WorldConfig(seed=1, task="FindCave", caves=0).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, task="MakeWaterfall", mountains=0).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, task="CreateVillageAnimalPen", animals=1).validate()
    with pytest.raises(WorldError):
        WorldConfig(seed=1, task="BuildVillageHouse", villages=0).validate()


def test_config_round_trip():
    config = WorldConfig(seed=99, side_length=48, caves=2, task="MakeWaterfall")
    assert WorldConfig.from_dict(config.to_dict()) == config


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def test_gait_step_lengths():
    origin = odometry.Pose()
    walk = odometry.update(origin, ActionFrame(forward=True))
    sprint = odometry.update(origin, ActionFrame(forward=True, sprint=True))
    sj = odometry.update(origin, ActionFrame(forward=True, sprint=True, jump=True))
    assert abs(walk.y - WALK) <= 1e-9 and abs(walk.x) <= 1e-9
    assert abs(sprint.y - SPRINT) <= 1e-9
    assert abs(sj.y - SPRINT_JUMP) <= 1e-9
    # Jumping without sprinting moves at walking pace; jumping in place does not move.
    jump_walk = odometry.update(origin, ActionFrame(forward=True, jump=True))
    assert abs(jump_walk.y - WALK) <= 1e-9
    still = odometry.update(origin, ActionFrame(jump=True))
    assert (still.x, still.y) == (0.0, 0.0)


def test_strafe_and_diagonal_lengths():
    origin = odometry.Pose()
    left = odometry.update(origin, ActionFrame(left=True))
    assert abs(left.x + WALK) <= 1e-9 and abs(left.y) <= 1e-9
    back = odometry.update(origin, ActionFrame(back=True))
    assert abs(back.y + WALK) <= 1e-9
    diag = odometry.update(origin, ActionFrame(forward=True, right=True))
    assert abs(np.hypot(diag.x, diag.y) - WALK) <= 1e-9
    # Opposed keys cancel.
    frozen = odometry.update(origin, ActionFrame(forward=True, back=True))
    assert (frozen.x, frozen.y) == (0.0, 0.0)


def test_yaw_applies_before_displacement():
    origin = odometry.Pose()
    pose = odometry.update(origin, ActionFrame(forward=True, camera_yaw_delta=90.0))
    assert abs(pose.x - WALK) <= 1e-9
    assert abs(pose.y) <= 1e-9
    assert pose.heading == 90.0


def test_world_step_matches_estimator_on_open_ground():
    world = flat_world()
    est = odometry.Pose()
    script = [
        ActionFrame(forward=True),
        ActionFrame(forward=True, sprint=True),
        ActionFrame(camera_yaw_delta=90.0, forward=True),
        ActionFrame(forward=True, jump=True),
        ActionFrame(camera_yaw_delta=-135.0),
        ActionFrame(forward=True, left=True),
    ]
    for action in script:
        _, events = world.step(action, build_observation=False)
        assert "blocked" not in events
        est = odometry.update(est, action)
    truth = world.ground_truth_pose()
    assert abs(truth.x - est.x) <= 1e-9
    assert abs(truth.y - est.y) <= 1e-9
    assert abs(truth.heading - est.heading) <= 1e-9


# ---------------------------------------------------------------------------
# Obstructions and drift
# ---------------------------------------------------------------------------

def test_tall_wall_blocks_and_drift_is_step_multiple():
    world = flat_world()
    cx, cy = world.agent_cell()
    world.heights[cx, cy + 1] += 2  # sheer wall straight ahead
    est = odometry.Pose()
    blocked = 0
    for _ in range(10):
        _, events = world.step(ActionFrame(forward=True), build_observation=False)
        est = odometry.update(est, ActionFrame(forward=True))
        if "blocked" in events:
            blocked += 1
    assert blocked >= 1
    assert world.last_blocked
    truth = world.ground_truth_pose()
    assert truth.x == 0.0
    drift = est.y - truth.y
    assert abs(drift - blocked * WALK) <= 1e-9
    # The agent never entered the walled cell.
    assert world.agent_cell() == (cx, cy)


def test_single_rise_needs_jump():
    world = flat_world()
    cx, cy = world.agent_cell()
    world.heights[cx, cy + 1] += 1
    blocked = 0
    for _ in range(5):
        _, events = world.step(ActionFrame(forward=True), build_observation=False)
        if "blocked" in events:
            blocked += 1
    assert blocked >= 1
    assert world.agent_cell() == (cx, cy)
    for _ in range(5):
        world.step(ActionFrame(forward=True, jump=True), build_observation=False)
        if world.agent_cell() != (cx, cy):
            break
    assert world.agent_cell() == (cx, cy + 1)


def test_world_border_blocks():
    world = flat_world()
    world.body.y = world.config.side_length - 0.1
    _, events = world.step(ActionFrame(forward=True), build_observation=False)
    assert "blocked" in events


def test_village_house_cell_is_impassable_even_with_jump():
    world = flat_world()
    cx, cy = world.agent_cell()
    world.kinds[cx, cy + 1] = VILLAGE_HOUSE
    for _ in range(5):
        _, events = world.step(ActionFrame(forward=True, jump=True),
                               build_observation=False)
    assert world.agent_cell() == (cx, cy)
    assert "blocked" in events


def test_water_sets_swimming_and_caps_sprint():
    world = flat_world()
    cx, cy = world.agent_cell()
    world.kinds[cx, cy + 1] = WATER
    world.kinds[cx, cy + 2] = WATER
    obs = None
    for _ in range(3):
        obs, _ = world.step(ActionFrame(forward=True))
    assert world.agent_cell() == (cx, cy + 1)
    assert obs.swimming
    before = world.body.y
    world.step(ActionFrame(forward=True, sprint=True), build_observation=False)
    assert abs((world.body.y - before) - WALK) <= 1e-9


# ---------------------------------------------------------------------------
# Items
# ---------------------------------------------------------------------------

def test_initial_loadout_and_spawn():
    world = flat_world()
    mid = world.config.side_length // 2 + 0.5
    assert (world.body.x, world.body.y) == (mid, mid)
    assert world.body.inventory[ITEM_BLOCKS] == 64
    assert world.body.inventory[ITEM_WATER_BUCKET] == 1
    assert world.body.inventory[ITEM_SNOWBALL] == 1
    for food in FOOD_ITEMS:
        assert world.body.inventory[food] == 8
    assert world.body.equipped is None


def test_equip_rules():
    world = flat_world()
    world.step(ActionFrame(equip=ITEM_SNOWBALL), build_observation=False)
    assert world.body.equipped == ITEM_SNOWBALL
    world.step(ActionFrame(equip="empty_hand"), build_observation=False)
    assert world.body.equipped is None
    world.body.inventory[ITEM_WATER_BUCKET] = 0
    _, events = world.step(ActionFrame(equip=ITEM_WATER_BUCKET), build_observation=False)
    assert "equip_missing" in events
    assert world.body.equipped is None
    with pytest.raises(ValueError):
        ActionFrame(equip="trident")


def test_place_block_mechanics():
    world = flat_world()
    cx, cy = world.agent_cell()
    base = int(world.heights[cx, cy])
    _, events = world.step(ActionFrame(place_block=True), build_observation=False)
    assert "placed_block" in events
    assert world.kinds[cx, cy + 1] == PLACED_BLOCK
    assert int(world.heights[cx, cy + 1]) == base + 1
    assert world.body.inventory[ITEM_BLOCKS] == 63

    world.kinds[cx, cy + 1] = VILLAGE_HOUSE
    _, events = world.step(ActionFrame(place_block=True), build_observation=False)
    assert "place_refused" in events

    world.body.inventory[ITEM_BLOCKS] = 0
    _, events = world.step(ActionFrame(place_block=True), build_observation=False)
    assert "inventory_empty" in events


def test_place_block_out_of_bounds():
    world = flat_world()
    world.body.x = 0.5
    world.body.y = 0.5
    world.body.heading = 180.0  # facing the southern border
    _, events = world.step(ActionFrame(place_block=True), build_observation=False)
    assert "place_out_of_bounds" in events
    assert world.body.inventory[ITEM_BLOCKS] == 64


def test_waterfall_gates():
    world = flat_world(task="MakeWaterfall")
    # Nothing equipped: using the hand is a no-op.
    _, events = world.step(ActionFrame(use_item=True), build_observation=False)
    assert "use_noop" in events
    # Bucket out but looking ahead from low ground: refused.
    _, events = world.step(ActionFrame(equip=ITEM_WATER_BUCKET, use_item=True),
                           build_observation=False)
    assert "bucket_refused" in events
    # Enough height and a steep downward look angle: waterfall.
    cx, cy = world.agent_cell()
    world.heights[cx, cy] = 2
    _, events = world.step(ActionFrame(camera_pitch_delta=60.0, use_item=True),
                           build_observation=False)
    assert "waterfall_placed" in events
    assert world.waterfalls == [(cx, cy)]
    assert world.task_predicates()["waterfall_placed"]
    assert world.body.inventory[ITEM_WATER_BUCKET] == 0
    # The bucket is spent.
    _, events = world.step(ActionFrame(use_item=True), build_observation=False)
    assert "use_noop" in events


def test_snowball_ends_episode():
    world = flat_world()
    world.step(ActionFrame(forward=True), build_observation=False)
    _, events = world.step(ActionFrame(throw_snowball=True), build_observation=False)
    assert "snowball_thrown" in events
    assert world.terminated
    assert world.outcome.terminated_by_snowball
    assert world.outcome.ticks_elapsed == 2
    assert world.body.inventory[ITEM_SNOWBALL] == 0
    with pytest.raises(EpisodeOver):
        world.step(ActionFrame(), build_observation=False)
    # finalize() after termination just returns the existing outcome.
    assert world.finalize() is world.outcome


def test_tick_limit_terminates_without_snowball():
    world = flat_world(max_ticks=5)
    events = []
    for _ in range(5):
        _, events = world.step(ActionFrame(), build_observation=False)
    assert "tick_limit" in events
    assert world.terminated
    assert not world.outcome.terminated_by_snowball
    assert world.outcome.ticks_elapsed == 5


def test_finalize_without_termination():
    world = flat_world()
    world.step(ActionFrame(forward=True), build_observation=False)
    world.step(ActionFrame(forward=True), build_observation=False)
    outcome = world.finalize()
    assert not outcome.terminated_by_snowball
    assert outcome.ticks_elapsed == 2
    with pytest.raises(EpisodeOver):
        world.step(ActionFrame(), build_observation=False)


# ---------------------------------------------------------------------------
# Task predicates and built structures
# ---------------------------------------------------------------------------

def test_cave_predicate_tracks_agent_cell():
    world = flat_world()
    assert not world.task_predicates()["inside_cave_at_end"]
    assert world.cave_interiors, "FindCave worlds must generate caves"
    x, y = world.cave_interiors[0]
    world.body.x, world.body.y = x, y
    assert world.kinds[world.agent_cell()] == CAVE_INTERIOR
    assert world.task_predicates()["inside_cave_at_end"]


def _paint_ring(world, x0, y0):
    """Paint a 5x5 square ring of placed blocks with corner at (x0, y0)."""
    for u in range(5):
        for v in range(5):
            if u in (0, 4) or v in (0, 4):
                world.kinds[x0 + u, y0 + v] = PLACED_BLOCK
                world.heights[x0 + u, y0 + v] = 3


def test_house_detected_from_placed_ring():
    world = flat_world(task="BuildVillageHouse")
    assert not world.task_predicates()["house_built"]
    _paint_ring(world, 4, 4)
    # Any block placement refreshes the structure caches.
    world.step(ActionFrame(place_block=True), build_observation=False)
    assert world.task_predicates()["house_built"]


def test_house_tolerates_one_missing_wall_cell_but_not_two():
    world = flat_world(task="BuildVillageHouse")
    _paint_ring(world, 4, 4)
    world.kinds[4, 4] = GRASS
    world.step(ActionFrame(place_block=True), build_observation=False)
    assert world.task_predicates()["house_built"]
    world.kinds[8, 8] = GRASS
    world.step(ActionFrame(place_block=True), build_observation=False)
    assert not world.task_predicates()["house_built"]


def test_pen_needs_two_animals_of_one_species():
    world = flat_world(task="CreateVillageAnimalPen")
    _paint_ring(world, 4, 4)
    pig, cow = world.entities[0], world.entities[1]
    pig.species = "pig"
    cow.species = "cow"
    pig.x, pig.y = 5.5, 5.5
    cow.x, cow.y = 7.5, 7.5
    world.step(ActionFrame(place_block=True), build_observation=False)
    assert world.pens_with_animals(min_same_species=1)
    assert not world.task_predicates()["pen_with_animals"]
    cow.species = "pig"
    assert world.task_predicates()["pen_with_animals"]


def test_lured_animal_approaches_and_stops_at_standoff():
    world = flat_world(task="CreateVillageAnimalPen")
    cow = world.entities[0]
    cow.species = "cow"
    cow.x, cow.y = world.body.x, world.body.y + 4.0
    world.step(ActionFrame(equip="food_cow"), build_observation=False)
    assert cow.lured
    d1 = np.hypot(cow.x - world.body.x, cow.y - world.body.y)
    assert abs((4.0 - d1) - 0.15) <= 1e-9
    for _ in range(60):
        world.step(ActionFrame(), build_observation=False)
    d2 = np.hypot(cow.x - world.body.x, cow.y - world.body.y)
    assert d2 <= 0.3 + 1e-9
    # Stowing the food freezes the animal even though it stays lured.
    world.body.x += 2.0
    world.step(ActionFrame(equip="empty_hand"), build_observation=False)
    d3 = np.hypot(cow.x - world.body.x, cow.y - world.body.y)
    world.step(ActionFrame(), build_observation=False)
    d4 = np.hypot(cow.x - world.body.x, cow.y - world.body.y)
    assert cow.lured and d3 == d4


def test_unmatched_food_does_not_lure():
    world = flat_world(task="CreateVillageAnimalPen")
    cow = world.entities[0]
    cow.species = "cow"
    cow.x, cow.y = world.body.x, world.body.y + 3.0
    world.step(ActionFrame(equip="food_pig"), build_observation=False)
    assert not cow.lured


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def test_observation_is_egocentric():
    world = flat_world()
    cx, cy = world.agent_cell()
    world.kinds[cx, cy + 4] = MOUNTAIN  # four cells north
    world._rebuild_terrain_caches()
    obs = world.observe()
    assert obs.kinds.shape == (9, 9) and obs.heights.shape == (9, 9)
    assert obs.kinds[0, 4] == MOUNTAIN  # ahead while facing north
    assert obs.kinds[4, 4] != UNKNOWN   # own cell is always visible
    # Cells behind the agent fall outside the view cone.
    assert obs.kinds[8, 4] == UNKNOWN
    # Turn east: the same mountain is now on the left edge and out of view.
    world.body.heading = 90.0
    obs = world.observe()
    assert obs.kinds[0, 4] != MOUNTAIN
    world.kinds[cx + 4, cy] = MOUNTAIN  # four cells east
    world._rebuild_terrain_caches()
    obs = world.observe()
    assert obs.kinds[0, 4] == MOUNTAIN


def test_entity_bearings_are_clockwise_positive():
    world = flat_world(task="CreateVillageAnimalPen")
    world.entities[:] = world.entities[:1]
    cow = world.entities[0]
    cow.species = "cow"
    cow.x, cow.y = world.body.x + 3.0, world.body.y + 3.0
    obs = world.observe()
    assert len(obs.entities) == 1
    species, bearing, dist = obs.entities[0]
    assert species == "cow"
    assert abs(bearing - 45.0) <= 1e-9
    assert abs(dist - np.hypot(3.0, 3.0)) <= 1e-9
    # Turning south puts the animal behind the agent.
    world.body.heading = 180.0
    assert world.observe().entities == ()
    # Out of range entirely.
    world.body.heading = 0.0
    cow.x = world.body.x
    cow.y = world.body.y + 17.0
    assert world.observe().entities == ()


# ---------------------------------------------------------------------------
# Generation, digests, reachability
# ---------------------------------------------------------------------------

def test_same_seed_same_world_different_seed_different_world():
    a = flat_world(seed=77)
    b = flat_world(seed=77)
    c = flat_world(seed=78)
    assert a.digest == b.digest
    assert np.array_equal(a.kinds, b.kinds)
    assert np.array_equal(a.heights, b.heights)
    assert [(e.species, e.x, e.y) for e in a.entities] == \
        [(e.species, e.x, e.y) for e in b.entities]
    assert a.digest != c.digest
    assert generate_world(a.config).digest == a.digest


def test_every_task_generates():
    for task in TASKS:
        world = flat_world(seed=5, task=task)
        assert world.config.task == task
        assert not world.terminated


def test_reachable_cells_matches_reference_search():
    for seed in (3, 4, 5):
        world = flat_world(seed=seed)
        reach = reachable_cells(world)
        side = world.config.side_length
        seen = np.zeros((side, side), dtype=bool)
        start = world.agent_cell()
        seen[start] = True
        queue = collections.deque([start])
        while queue:
            x, y = queue.popleft()
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if not (0 <= nx < side and 0 <= ny < side) or seen[nx, ny]:
                    continue
                if world.kinds[nx, ny] == VILLAGE_HOUSE:
                    continue
                if world.heights[nx, ny] - world.heights[x, y] >= 2:
                    continue
                seen[nx, ny] = True
                queue.append((nx, ny))
        assert np.array_equal(reach, seen)
        assert reach[start]
        assert not reach[world.kinds == VILLAGE_HOUSE].any()
