import numpy as np
import pytest

from gridquest import perception
from gridquest.perception import (
    FEATURE_DIM,
    LABELS,
    NUM_LABELS,
    REFERENCE_LABEL_RATES,
    Dataset,
    Hyperparams,
    LabeledFrame,
    LabelError,
    LinearLabelClassifier,
    StateLabelSet,
    class_weights,
    corrupt_labels,
    featurize,
    load_classifier,
    load_dataset,
    loss_and_grad,
    oracle_labels,
    sample_class,
    save_classifier,
    save_dataset,
    split_dataset,
    synthesize_frames,
    train_classifier,
    weighted_sample,
)
from gridquest.world import GRASS, UNKNOWN, World, WorldConfig


def single_label_frames(spec):
    """Frames carrying one label each, e.g. {'none': 6, 'has_cave': 3}."""
    frames = []
    for name, count in spec.items():
        labels = StateLabelSet.none_set() if name == "none" else \
            StateLabelSet.from_active([name])
        for _ in range(count):
            frames.append(LabeledFrame(features=np.zeros(3), labels=labels))
    return Dataset(frames)


# ---------------------------------------------------------------------------
# Label sets
# ---------------------------------------------------------------------------

def test_none_is_exclusive():
    assert StateLabelSet.none_set().none
    with pytest.raises(LabelError):
        StateLabelSet(none=True, has_cave=True)
    with pytest.raises(LabelError):
        StateLabelSet(none=False)
    labels = StateLabelSet.from_active(["has_cave", "has_animals"])
    assert not labels.none
    assert labels.active() == ("has_cave", "has_animals")
    assert "has_cave" in labels and "has_mountain" not in labels
    with pytest.raises(LabelError):
        StateLabelSet.from_active(["has_dragon"])
    # from_active tolerates an explicit 'none' alongside nothing else.
    assert StateLabelSet.from_active(["none"]).none


def test_bits_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(50):
        active = [name for name in LABELS[1:] if rng.random() < 0.3]
        labels = StateLabelSet.from_active(active)
        again = StateLabelSet.from_bits(labels.to_bits())
        assert again == labels
    assert StateLabelSet.none_set().to_bits() == 1
    arr = StateLabelSet.from_active(["has_cave"]).as_array()
    assert arr.tolist() == [0.0, 1.0] + [0.0] * 11


# ---------------------------------------------------------------------------
# Weighting and sampling
# ---------------------------------------------------------------------------

def test_reference_none_weight():
    corpus = synthesize_frames(10_000, np.random.default_rng(0))
    weights = class_weights(corpus)
    assert weights.counts[0] == 5447
    assert abs(weights.raw_weight("none") - 0.4553) <= 1e-12


def test_class_weights_known_counts():
    dataset = single_label_frames({"none": 6, "has_cave": 3, "has_animals": 1})
    weights = class_weights(dataset)
    assert weights.total == 10
    # Raw weights 1 - count/total: 0.4, 0.7, 0.9; normalised over 2.0.
    assert abs(weights.probability("none") - 0.2) <= 1e-12
    assert abs(weights.probability("has_cave") - 0.35) <= 1e-12
    assert abs(weights.probability("has_animals") - 0.45) <= 1e-12
    assert weights.probability("has_mountain") == 0.0
    assert weights.raw_weight("has_mountain") == 0.0
    with pytest.raises(LabelError):
        class_weights(Dataset([]))


def test_degenerate_corpus_falls_back_to_uniform():
    dataset = single_label_frames({"has_cave": 5})
    weights = class_weights(dataset)
    assert weights.probability("has_cave") == 1.0


def test_sampling_boosts_rare_classes():
    corpus = synthesize_frames(10_000, np.random.default_rng(1))
    weights = class_weights(corpus)
    rng = np.random.default_rng(2)
    draws = 30_000
    counts = {name: 0 for name in LABELS}
    for _ in range(draws):
        counts[sample_class(weights, rng)] += 1
    for name in LABELS:
        assert abs(counts[name] / draws - weights.probability(name)) <= 0.02
    rare = counts["animals_inside_pen"] / draws
    assert rare > REFERENCE_LABEL_RATES["animals_inside_pen"]


def test_weighted_sample_returns_matching_frames():
    corpus = synthesize_frames(5_000, np.random.default_rng(3))
    weights = class_weights(corpus)
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(400):
        frame = weighted_sample(corpus, weights, rng)
        hits += "animals_inside_pen" in frame.labels
    # Raw incidence is 0.81%; inverse-frequency sampling lifts it over 4%.
    assert hits / 400 > 0.04


def test_weighted_sample_raises_when_no_class_matches():
    donors = single_label_frames({"has_cave": 5})
    weights = class_weights(donors)
    only_none = single_label_frames({"none": 5})
    with pytest.raises(LabelError):
        weighted_sample(only_none, weights, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def test_split_sizes_exact():
    blank = StateLabelSet.none_set()
    feats = np.zeros(1)
    frames = [LabeledFrame(features=feats, labels=blank, tick=i)
              for i in range(81_888)]
    split = split_dataset(Dataset(frames), seed=13)
    assert len(split.train) == 65_510
    assert len(split.val) == 8_189
    assert len(split.test) == 8_189
    ticks = [f.tick for part in (split.train, split.val, split.test) for f in part]
    assert len(set(ticks)) == 81_888


def test_split_small_and_errors():
    blank = StateLabelSet.none_set()
    frames = [LabeledFrame(features=np.zeros(1), labels=blank, tick=i)
              for i in range(10)]
    split = split_dataset(Dataset(frames), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (8, 1, 1)
    with pytest.raises(LabelError):
        split_dataset(Dataset(frames[:9]), seed=0)
    again = split_dataset(Dataset(frames), seed=0)
    assert [f.tick for f in split.train] == [f.tick for f in again.train]
    other = split_dataset(Dataset(frames), seed=1)
    assert [f.tick for f in split.train] != [f.tick for f in other.train]


def test_dataset_rejects_mixed_dimensions():
    blank = StateLabelSet.none_set()
    with pytest.raises(LabelError):
        Dataset([LabeledFrame(features=np.zeros(2), labels=blank),
                 LabeledFrame(features=np.zeros(3), labels=blank)])


# ---------------------------------------------------------------------------
# Features and oracle labels
# ---------------------------------------------------------------------------

def test_featurize_layout():
    world = World(WorldConfig(seed=21, task="CreateVillageAnimalPen"))
    world.entities[:] = world.entities[:1]
    cow = world.entities[0]
    cow.species = "cow"
    cow.x, cow.y = world.body.x, world.body.y + 3.0
    obs = world.observe()
    vec = featurize(obs)
    assert vec.shape == (FEATURE_DIM,)
    one_hot = vec[: 81 * 9].reshape(81, 9)
    assert np.array_equal(one_hot.sum(axis=1), np.ones(81))
    heights = vec[81 * 9: 81 * 9 + 81]
    assert np.allclose(heights, obs.heights.ravel() / 8.0)
    cow_block = vec[810 + 4 * 2: 810 + 4 * 3]
    assert cow_block[0] == 1.0
    assert abs(cow_block[1] - 3.0 / 16.0) <= 1e-9
    assert abs(cow_block[2]) <= 1e-9
    assert cow_block[3] == 0.25
    assert vec[830] == 0.0  # not swimming
    assert vec[831] == obs.pitch / 90.0


def test_featurize_counts_herds_and_keeps_nearest():
    world = World(WorldConfig(seed=21, task="CreateVillageAnimalPen"))
    world.entities[:] = world.entities[:2]
    near, far = world.entities
    near.species = far.species = "sheep"
    near.x, near.y = world.body.x, world.body.y + 2.0
    far.x, far.y = world.body.x, world.body.y + 8.0
    vec = featurize(world.observe())
    sheep = vec[810 + 4 * 3: 810 + 4 * 4]
    assert abs(sheep[1] - 2.0 / 16.0) <= 1e-9
    assert sheep[3] == 0.5


def stripes_world():
    """A label-free world: no features, no flat 6x6 windows, no animals."""
    world = World(WorldConfig(seed=9))
    world.kinds[:] = GRASS
    world.heights[:] = 1
    world.heights[::2, :] = 2
    world.entities.clear()
    world.waterfalls.clear()
    world._cave_arr = np.zeros((0, 2))
    world._big_water_arr = np.zeros((0, 2))
    world._summit_arr = np.zeros((0, 2))
    world._rebuild_terrain_caches()
    return world


def test_oracle_labels_none_on_featureless_ground():
    world = stripes_world()
    assert oracle_labels(world) == StateLabelSet.none_set()


def test_oracle_open_space():
    world = stripes_world()
    world.heights[:] = 1
    world._rebuild_terrain_caches()
    labels = oracle_labels(world)
    assert labels.active() == ("has_open_space",)


def test_oracle_facing_wall_and_top():
    world = stripes_world()
    world.heights[:] = 1
    cx, cy = world.agent_cell()
    world.heights[cx, cy + 1] = 3
    world._rebuild_terrain_caches()
    assert "facing_wall" in oracle_labels(world)
    world.heights[:] = 1
    world.heights[cx, cy] = 5
    world._rebuild_terrain_caches()
    labels = oracle_labels(world)
    assert "at_the_top" in labels
    assert "facing_wall" not in labels


def test_oracle_cave_and_animals():
    world = World(WorldConfig(seed=31, task="FindCave"))
    x, y = world.cave_interiors[0]
    world.body.x, world.body.y = x, y
    assert "inside_cave" in oracle_labels(world)
    ex, ey = world.cave_entrances[0]
    world.body.x, world.body.y = ex + 0.5, ey - 3.0 + 0.5
    world.body.heading = 0.0
    assert "has_cave" in oracle_labels(world)

    world.body.x, world.body.y = world.spawn_x, world.spawn_y
    animal = world.entities[0]
    animal.x, animal.y = world.body.x, world.body.y + 5.0
    assert "has_animals" in oracle_labels(world)


def test_oracle_mountain_range_gate():
    world = stripes_world()
    world._summit_arr = np.array([[world.body.x, world.body.y + 20.0]])
    assert "has_mountain" in oracle_labels(world)
    world._summit_arr = np.array([[world.body.x, world.body.y + 5.0]])
    assert "has_mountain" not in oracle_labels(world)


def test_oracle_waterfall_view():
    world = stripes_world()
    cx, cy = world.agent_cell()
    world.waterfalls.append((cx, cy + 4))
    assert "good_waterfall_view" in oracle_labels(world)


def test_corrupt_labels_rates():
    rng = np.random.default_rng(17)
    base = StateLabelSet.from_active(["has_cave"])
    assert corrupt_labels(base, 0.0, rng) == base
    flipped = corrupt_labels(StateLabelSet.none_set(), 1.0, rng)
    assert len(flipped.active()) == NUM_LABELS - 1
    counts = np.zeros(NUM_LABELS - 1)
    trials = 2_000
    for _ in range(trials):
        out = corrupt_labels(StateLabelSet.none_set(), 0.3, rng)
        counts += [name in out for name in LABELS[1:]]
    assert np.all(np.abs(counts / trials - 0.3) <= 0.04)
    with pytest.raises(LabelError):
        corrupt_labels(base, 1.5, rng)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2026)
    dim = 24
    worst = 0.0
    for _ in range(20):
        X = rng.standard_normal((16, dim))
        Y = (rng.random((16, NUM_LABELS)) < 0.3).astype(float)
        W = 0.1 * rng.standard_normal((NUM_LABELS, dim))
        b = 0.1 * rng.standard_normal(NUM_LABELS)
        _, gw, gb = loss_and_grad(W, b, X, Y)
        for _ in range(25):
            i = int(rng.integers(NUM_LABELS))
            j = int(rng.integers(dim))
            step = 1e-6
            Wp = W.copy(); Wp[i, j] += step
            Wm = W.copy(); Wm[i, j] -= step
            lp, _, _ = loss_and_grad(Wp, b, X, Y)
            lm, _, _ = loss_and_grad(Wm, b, X, Y)
            numeric = (lp - lm) / (2 * step)
            denom = max(abs(numeric) + abs(gw[i, j]), 1e-8)
            worst = max(worst, abs(numeric - gw[i, j]) / denom)
        i = int(rng.integers(NUM_LABELS))
        bp = b.copy(); bp[i] += 1e-6
        bm = b.copy(); bm[i] -= 1e-6
        lp, _, _ = loss_and_grad(W, bp, X, Y)
        lm, _, _ = loss_and_grad(W, bm, X, Y)
        numeric = (lp - lm) / 2e-6
        denom = max(abs(numeric) + abs(gb[i]), 1e-8)
        worst = max(worst, abs(numeric - gb[i]) / denom)
    assert worst < 1e-5


def test_training_reaches_per_label_accuracy():
    corpus = synthesize_frames(12_000, np.random.default_rng(5))
    split = split_dataset(corpus, seed=6)
    clf, report = train_classifier(split, Hyperparams(seed=7))
    assert report.train_size == len(split.train)
    assert report.epoch_losses[0] > report.epoch_losses[-1]
    assert len(report.epoch_losses) == Hyperparams().epochs + 1
    for name in LABELS:
        assert report.val_accuracy[name] >= 0.95, name
    pred = clf.predict_batch(split.test.features_matrix())
    truth = split.test.labels_matrix() > 0.5
    assert (pred == truth).mean() >= 0.95


def test_untrained_classifier_predicts_none():
    clf = LinearLabelClassifier.zeros(5)
    assert clf.predict(np.zeros(5)) == StateLabelSet.none_set()
    with pytest.raises(LabelError):
        clf.predict(np.zeros(4))
    batch = clf.predict_batch(np.zeros((3, 5)))
    assert batch[:, 0].all() and not batch[:, 1:].any()


def test_hyperparams_validation():
    with pytest.raises(LabelError):
        Hyperparams(learning_rate=0.0).validate()
    with pytest.raises(LabelError):
        Hyperparams(batch_size=0).validate()
    with pytest.raises(LabelError):
        Hyperparams(epochs=-1).validate()


def test_synthesize_frames_exact_counts():
    n = 2_000
    corpus = synthesize_frames(n, np.random.default_rng(8))
    assert len(corpus) == n
    counts = corpus.labels_matrix().sum(axis=0)
    for i, name in enumerate(LABELS):
        assert counts[i] == round(REFERENCE_LABEL_RATES[name] * n), name
    sizes = corpus.labels_matrix()[:, 1:].sum(axis=1)
    assert (sizes >= 2).any(), "imbalanced rates should force some multi-label frames"
    with pytest.raises(LabelError):
        synthesize_frames(0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    corpus = synthesize_frames(64, np.random.default_rng(9))
    path = tmp_path / "corpus.txt"
    save_dataset(corpus, path)
    again = load_dataset(path)
    assert len(again) == len(corpus)
    for a, b in zip(corpus, again):
        assert a.labels == b.labels
        assert np.array_equal(a.features, b.features)
        assert (a.episode, a.tick) == (b.episode, b.tick)
    bad = tmp_path / "bad.txt"
    bad.write_text("some-other-format 9\n")
    with pytest.raises(LabelError):
        load_dataset(bad)


def test_classifier_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    clf = LinearLabelClassifier(rng.standard_normal((NUM_LABELS, 7)),
                                rng.standard_normal(NUM_LABELS), threshold=0.4)
    path = tmp_path / "clf.txt"
    save_classifier(clf, path)
    again = load_classifier(path)
    assert np.array_equal(clf.weights, again.weights)
    assert np.array_equal(clf.biases, again.biases)
    assert again.threshold == 0.4
    bad = tmp_path / "bad.txt"
    bad.write_text("gridquest-dataset 1\n")
    with pytest.raises(LabelError):
        load_classifier(bad)
