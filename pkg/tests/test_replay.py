import numpy as np
import pytest

from gridquest.control import AgentRuntime, run_episode
from gridquest.replay import (
    Replay,
    ReplayError,
    ReplayStore,
    from_episode,
    parse_replay,
    replay_id,
    serialize_replay,
    strip_ground_truth,
)
from gridquest.world import World, WorldConfig


def sample_replay(seed=3, task="FindCave", condition="Human", max_ticks=3000):
    config = WorldConfig(seed=seed, task=task, max_ticks=max_ticks)
    world = World(config)
    runtime = AgentRuntime(world, condition, np.random.default_rng(seed + 10))
    result = run_episode(world, runtime)
    return from_episode(result, config)


REPLAY = sample_replay()


def test_replay_id_shape():
    assert replay_id("FindCave", "Human", 3) == "FindCave-Human-3"
    assert REPLAY.replay_id == "FindCave-Human-3"


def test_serialize_parse_round_trip_is_bit_exact():
    text = serialize_replay(REPLAY)
    parsed = parse_replay(text)
    assert serialize_replay(parsed) == text
    assert parsed.task == REPLAY.task
    assert parsed.condition == REPLAY.condition
    assert parsed.seed == REPLAY.seed
    assert parsed.world == REPLAY.world
    assert parsed.world_digest == REPLAY.world_digest
    assert parsed.has_truth
    assert len(parsed.ticks) == len(REPLAY.ticks)
    for a, b in zip(REPLAY.ticks, parsed.ticks):
        assert a.tick == b.tick
        assert a.action == b.action
        assert a.labels == b.labels
        assert a.subtask == b.subtask
        assert (a.est.x, a.est.y, a.est.heading) == (b.est.x, b.est.y, b.est.heading)
        assert (a.truth.x, a.truth.y, a.truth.heading) == \
            (b.truth.x, b.truth.y, b.truth.heading)
    assert parsed.outcome.to_dict() == REPLAY.outcome.to_dict()
    assert parsed.map_export == REPLAY.map_export


def test_strip_ground_truth_keeps_agent_visible_fields():
    stripped = strip_ground_truth(REPLAY)
    assert not stripped.has_truth
    assert all(t.truth is None for t in stripped.ticks)
    # The original is untouched.
    assert REPLAY.has_truth and REPLAY.ticks[0].truth is not None

    text = serialize_replay(stripped)
    parsed = parse_replay(text)
    assert serialize_replay(parsed) == text
    for a, b in zip(REPLAY.ticks, parsed.ticks):
        assert a.action == b.action
        assert a.labels == b.labels
        assert a.subtask == b.subtask
        assert (a.est.x, a.est.y, a.est.heading) == (b.est.x, b.est.y, b.est.heading)
        assert b.truth is None
    assert parsed.outcome.to_dict() == REPLAY.outcome.to_dict()
    assert parsed.map_export == REPLAY.map_export


def test_serialize_refuses_missing_truth():
    broken = strip_ground_truth(REPLAY)
    broken.has_truth = True
    with pytest.raises(ReplayError):
        serialize_replay(broken)


def test_parse_rejects_malformed_documents():
    text = serialize_replay(REPLAY)
    lines = text.splitlines()

    with pytest.raises(ReplayError):
        parse_replay(lines[0] + "\n")
    with pytest.raises(ReplayError):
        parse_replay(text.replace("gridquest-replay", "other-format", 1))
    with pytest.raises(ReplayError):
        parse_replay(text.replace('"version": 1', '"version": 9', 1))
    with pytest.raises(ReplayError):
        parse_replay(text.replace('"tick_rate": 20', '"tick_rate": 30', 1))

    # Breaking tick contiguity is caught.
    second = lines[2].split("|")
    second[1] = "7"
    broken = "\n".join([lines[0], lines[1], "|".join(second)] + lines[3:]) + "\n"
    with pytest.raises(ReplayError):
        parse_replay(broken)

    # A tick line with the wrong field count is caught.
    truncated = "\n".join([lines[0], lines[1].rsplit("|", 1)[0], lines[-1]]) + "\n"
    with pytest.raises(ReplayError):
        parse_replay(truncated)


def test_store_round_trip_and_catalog(tmp_path):
    store = ReplayStore(tmp_path / "replays")
    other = sample_replay(seed=4, condition="Hybrid", max_ticks=400)
    rid_a = store.save(REPLAY)
    rid_b = store.save(other)
    assert store.ids() == sorted([rid_a, rid_b])
    assert store.read_text(rid_a) == serialize_replay(REPLAY)
    loaded = store.load(rid_b)
    assert serialize_replay(loaded) == serialize_replay(other)
    header = store.header(rid_a)
    assert header["task"] == "FindCave"
    assert header["condition"] == "Human"
    assert header["seed"] == 3
    catalog = store.catalog()
    assert catalog == {"FindCave": {"Human": [rid_a], "Hybrid": [rid_b]}}


def test_store_rejects_bad_ids(tmp_path):
    store = ReplayStore(tmp_path / "replays")
    with pytest.raises(ReplayError):
        store.path("../escape")
    with pytest.raises(ReplayError):
        store.path("a/b")
    with pytest.raises(ReplayError):
        store.path(".hidden")
    with pytest.raises(ReplayError):
        store.load("FindCave-Human-404")
    with pytest.raises(ReplayError):
        store.read_text("FindCave-Human-404")
    with pytest.raises(ReplayError):
        store.header("FindCave-Human-404")
