"""Frame labels: the 13-way multi-label state vocabulary and its classifier.

A frame is summarised by up to 13 boolean labels ("has_cave", "facing_wall",
...).  The "none" label is special: it is never predicted directly but
derived, true exactly when no other label fires.  Training data is heavily
skewed toward "none", so minibatches are drawn with inverse-frequency class
weights: a class seen in a fraction f of frames gets raw weight 1 - f, and
the weights are normalised into a distribution before sampling.

The classifier itself is 13 independent logistic heads over a shared
feature vector, trained with plain SGD.  ``oracle_labels`` computes the
same vocabulary straight from world geometry and is both the training
target and the perfect-perception baseline for agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import world as worldmod
from .world import Observation, World

LABELS = (
    "none",
    "has_cave",
    "inside_cave",
    "danger_ahead",
    "has_mountain",
    "facing_wall",
    "at_the_top",
    "good_waterfall_view",
    "good_pen_view",
    "good_house_view",
    "has_animals",
    "has_open_space",
    "animals_inside_pen",
)
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
NUM_LABELS = len(LABELS)

#: Reference per-frame incidence rates for each label, used when building
#: synthetic corpora with a realistic imbalance profile.
REFERENCE_LABEL_RATES = {
    "none": 0.5447,
    "has_cave": 0.0139,
    "inside_cave": 0.0129,
    "danger_ahead": 0.0383,
    "has_mountain": 0.0438,
    "facing_wall": 0.0455,
    "at_the_top": 0.0397,
    "good_waterfall_view": 0.0316,
    "good_pen_view": 0.0412,
    "good_house_view": 0.0258,
    "has_animals": 0.0938,
    "has_open_space": 0.0733,
    "animals_inside_pen": 0.0081,
}

# Observation feature layout: 81 cells one-hot over 9 kinds, 81 heights,
# 4 numbers per species, swimming flag, pitch.
_PATCH_CELLS = (2 * worldmod.PATCH_RADIUS + 1) ** 2
_KIND_CHANNELS = len(worldmod.TERRAIN_NAMES)
FEATURE_DIM = _PATCH_CELLS * _KIND_CHANNELS + _PATCH_CELLS + 4 * len(worldmod.SPECIES) + 2


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class StateLabelSet:
    """Immutable set of the 13 frame labels with the none-exclusivity rule."""

    none: bool = True
    has_cave: bool = False
    inside_cave: bool = False
    danger_ahead: bool = False
    has_mountain: bool = False
    facing_wall: bool = False
    at_the_top: bool = False
    good_waterfall_view: bool = False
    good_pen_view: bool = False
    good_house_view: bool = False
    has_animals: bool = False
    has_open_space: bool = False
    animals_inside_pen: bool = False

    def __post_init__(self):
        others = any(getattr(self, name) for name in LABELS[1:])
        if self.none == others:
            raise LabelError("'none' must be true exactly when no other label is set")

    @classmethod
    def from_active(cls, active: Iterable[str]) -> "StateLabelSet":
        names = set(active)
        names.discard("none")
        unknown = names.difference(LABELS)
        if unknown:
            raise LabelError(f"unknown labels: {sorted(unknown)}")
        return cls(none=not names, **{name: True for name in names})

    @classmethod
    def none_set(cls) -> "StateLabelSet":
        return cls()

    def active(self) -> tuple[str, ...]:
        return tuple(name for name in LABELS[1:] if getattr(self, name))

    def as_array(self) -> np.ndarray:
        return np.array([float(getattr(self, name)) for name in LABELS])

    def to_bits(self) -> int:
        bits = 0
        for i, name in enumerate(LABELS):
            if getattr(self, name):
                bits |= 1 << i
        return bits

    @classmethod
    def from_bits(cls, bits: int) -> "StateLabelSet":
        return cls(**{name: bool(bits >> i & 1) for i, name in enumerate(LABELS)})

    def __contains__(self, name: str) -> bool:
        return name in LABELS and bool(getattr(self, name))


@dataclass(frozen=True)
class LabeledFrame:
    """One training example: feature vector, label set, and where it came from."""

    features: np.ndarray
    labels: StateLabelSet
    episode: str = ""
    tick: int = 0


class Dataset:
    """A list of labelled frames with cached matrices for training."""

    def __init__(self, frames: Sequence[LabeledFrame]):
        self.frames = list(frames)
        if self.frames:
            dim = self.frames[0].features.shape
            for f in self.frames:
                if f.features.shape != dim:
                    raise LabelError("all frames in a dataset must share a feature dimension")
        self._X: Optional[np.ndarray] = None
        self._Y: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, idx: int) -> LabeledFrame:
        return self.frames[idx]

    def features_matrix(self) -> np.ndarray:
        if self._X is None:
            self._X = np.stack([f.features for f in self.frames]) if self.frames else np.zeros((0, 0))
        return self._X

    def labels_matrix(self) -> np.ndarray:
        if self._Y is None:
            self._Y = (np.stack([f.labels.as_array() for f in self.frames])
                       if self.frames else np.zeros((0, NUM_LABELS)))
        return self._Y

    def indices_by_class(self) -> dict[str, np.ndarray]:
        out = {}
        Y = self.labels_matrix()
        for i, name in enumerate(LABELS):
            out[name] = np.nonzero(Y[:, i] > 0.5)[0]
        return out


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency sampling weights over the classes present in a corpus.

    counts[i] is the number of frames carrying label i and total is the
    number of frames.  Classes that never occur are excluded from the
    distribution entirely.  When every present class covers the whole
    corpus the raw weights all vanish, and sampling falls back to uniform
    over the present classes.
    """

    counts: tuple
    total: int
    probabilities: tuple

    def probability(self, label: str) -> float:
        return self.probabilities[LABEL_INDEX[label]]

    def raw_weight(self, label: str) -> float:
        """The unnormalised weight 1 - count/total (0 for absent classes)."""
        count = self.counts[LABEL_INDEX[label]]
        return 1.0 - count / self.total if count > 0 else 0.0


def class_weights(dataset: Dataset) -> ClassWeights:
    if len(dataset) == 0:
        raise LabelError("cannot weight an empty dataset")
    counts = dataset.labels_matrix().sum(axis=0).astype(int)
    total = len(dataset)
    raw = np.where(counts > 0, 1.0 - counts / total, 0.0)
    present = counts > 0
    probs = np.zeros(NUM_LABELS)
    if raw[present].sum() <= 0.0:
        probs[present] = 1.0 / present.sum()
    else:
        probs[present] = raw[present] / raw[present].sum()
    return ClassWeights(counts=tuple(int(c) for c in counts), total=total,
                        probabilities=tuple(float(p) for p in probs))


def sample_class(weights: ClassWeights, rng: np.random.Generator) -> str:
    """Draw one class label from the weighted distribution."""
    idx = rng.choice(NUM_LABELS, p=np.array(weights.probabilities))
    return LABELS[int(idx)]


def weighted_sample(dataset: Dataset, weights: ClassWeights,
                    rng: np.random.Generator, max_retries: int = 64) -> LabeledFrame:
    """Draw a frame by first drawing a class, then a frame carrying it.

    The returned frame always contains the drawn class.  If the weights
    come from a different corpus and name a class this dataset lacks, the
    draw is retried a bounded number of times before raising.
    """
    by_class = dataset.indices_by_class()
    for _ in range(max_retries):
        label = sample_class(weights, rng)
        pool = by_class[label]
        if pool.size:
            return dataset[int(pool[rng.integers(0, pool.size)])]
    raise LabelError("weighted sampling kept drawing classes with no frames")


@dataclass(frozen=True)
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset


def split_dataset(dataset: Dataset, seed: int) -> DatasetSplit:
    """Shuffle deterministically and split 80 / 10 / 10 (rounded)."""
    n = len(dataset)
    if n < 10:
        raise LabelError(f"need at least 10 frames to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    train = [dataset[int(i)] for i in order[:n_train]]
    val = [dataset[int(i)] for i in order[n_train:n_train + n_val]]
    test = [dataset[int(i)] for i in order[n_train + n_val:]]
    return DatasetSplit(Dataset(train), Dataset(val), Dataset(test))


# ---------------------------------------------------------------------------
# Features and oracle labels
# ---------------------------------------------------------------------------


def featurize(obs: Observation) -> np.ndarray:
    """Flatten an observation into the shared feature vector (FEATURE_DIM,)."""
    vec = np.zeros(FEATURE_DIM)
    kinds = obs.kinds.ravel()
    vec[np.arange(_PATCH_CELLS) * _KIND_CHANNELS + kinds] = 1.0
    base = _PATCH_CELLS * _KIND_CHANNELS
    vec[base:base + _PATCH_CELLS] = obs.heights.ravel() / 8.0
    base += _PATCH_CELLS
    for species, bearing, dist in obs.entities:
        s = worldmod.SPECIES.index(species)
        off = base + 4 * s
        if vec[off] == 0.0:  # nearest of the species wins; entities arrive sorted
            vec[off] = 1.0
            vec[off + 1] = dist / worldmod.ENTITY_VIEW_RANGE
            vec[off + 2] = bearing / worldmod.FOV_HALF_ANGLE
        vec[off + 3] += 0.25
    base += 4 * len(worldmod.SPECIES)
    vec[base] = 1.0 if obs.swimming else 0.0
    vec[base + 1] = obs.pitch / 90.0
    return vec


def oracle_labels(world: World) -> StateLabelSet:
    """Ground-truth labels computed from world geometry (the training target)."""
    active = []
    body = world.body
    cx, cy = world.agent_cell()
    if world.kinds[cx, cy] == worldmod.CAVE_INTERIOR:
        active.append("inside_cave")
    if world._cave_arr.size and world.in_fov(world._cave_arr, 12.0).any():
        active.append("has_cave")
    if world._big_water_arr.size and world.in_fov(world._big_water_arr, 8.0).any():
        active.append("danger_ahead")
    if world._summit_arr.size and world.in_fov(
            world._summit_arr, 60.0, half_angle=50.0, min_range=15.0).any():
        active.append("has_mountain")

    kinds5, heights5 = world.neighbourhood(2)
    h_agent = world.agent_height()
    offs = np.arange(-2, 3)
    dxc = (cx + offs + 0.5)[:, None] - body.x
    dyc = (cy + offs + 0.5)[None, :] - body.y
    dist5 = np.hypot(dxc, dyc)
    rel5 = (np.degrees(np.arctan2(dxc, dyc)) - body.heading + 180.0) % 360.0 - 180.0
    ahead45 = np.abs(rel5) <= 45.0
    wallish = (heights5 - h_agent >= 2) | (kinds5 == worldmod.VILLAGE_HOUSE)
    if bool((wallish & ahead45 & (dist5 <= 1.6)).any()):
        active.append("facing_wall")
    if h_agent >= 4 and bool(((heights5 <= h_agent - 3) & ahead45 & (dist5 >= 1.0)).any()):
        active.append("at_the_top")

    if world.waterfalls:
        falls = np.array(world.waterfalls, dtype=float) + 0.5
        if world.in_fov(falls, 30.0).any():
            active.append("good_waterfall_view")

    lively_pens = world.pens_with_animals(min_same_species=1)
    here = world.agent_pen_region()
    for region in lively_pens:
        if here is not None and region["id"] == here["id"]:
            continue
        if world.in_fov(region["cells"], 20.0).any():
            active.append("good_pen_view")
            break
    if here is not None:
        for region in world.pens_with_animals(min_same_species=2):
            if region["id"] == here["id"]:
                active.append("animals_inside_pen")
                break

    if world._house_cells.size and world.in_fov(world._house_cells, 20.0).any():
        active.append("good_house_view")
    if world.entities:
        pos = np.array([(e.x, e.y) for e in world.entities])
        if world.in_fov(pos, worldmod.ENTITY_VIEW_RANGE).any():
            active.append("has_animals")
    if world._flat_anchor_arr.size and world.in_fov(
            world._flat_anchor_arr, 8.0, half_angle=30.0, min_range=2.0).any():
        active.append("has_open_space")
    return StateLabelSet.from_active(active)


def corrupt_labels(labels: StateLabelSet, flip_rate: float,
                   rng: np.random.Generator) -> StateLabelSet:
    """Flip each non-none label independently; 'none' is re-derived after."""
    if not (0.0 <= flip_rate <= 1.0):
        raise LabelError(f"flip_rate must be in [0, 1], got {flip_rate!r}")
    flips = rng.random(NUM_LABELS - 1) < flip_rate
    active = []
    for i, name in enumerate(LABELS[1:]):
        value = bool(getattr(labels, name)) ^ bool(flips[i])
        if value:
            active.append(name)
    return StateLabelSet.from_active(active)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


@dataclass
class Hyperparams:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or not math.isfinite(self.learning_rate):
            raise LabelError("learning_rate must be positive")
        if self.batch_size < 1:
            raise LabelError("batch_size must be >= 1")
        if self.epochs < 0:
            raise LabelError("epochs must be >= 0")


@dataclass
class TrainReport:
    epoch_losses: list
    val_accuracy: dict
    train_size: int
    val_size: int
    test_size: int
    seed: int


@dataclass
class LinearLabelClassifier:
    """13 independent logistic heads; threshold 0.5; 'none' derived."""

    weights: np.ndarray  # (NUM_LABELS, D)
    biases: np.ndarray   # (NUM_LABELS,)
    threshold: float = 0.5

    @classmethod
    def zeros(cls, feature_dim: int) -> "LinearLabelClassifier":
        return cls(np.zeros((NUM_LABELS, feature_dim)), np.zeros(NUM_LABELS))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.biases

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(features))

    def predict(self, features: np.ndarray) -> StateLabelSet:
        if features.shape != (self.weights.shape[1],):
            raise LabelError(
                f"expected features of shape ({self.weights.shape[1]},), got {features.shape}")
        probs = self.probabilities(features)
        active = [name for i, name in enumerate(LABELS)
                  if i != 0 and probs[i] > self.threshold]
        return StateLabelSet.from_active(active)

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        """Thresholded label matrix (n, 13) with the derived 'none' column."""
        fired = self.probabilities(X) > self.threshold
        fired[:, 0] = ~fired[:, 1:].any(axis=1)
        return fired


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(weights: np.ndarray, biases: np.ndarray,
                  X: np.ndarray, Y: np.ndarray):
    """Binary cross-entropy summed over heads, averaged over the batch.

    Summing over heads keeps each head's gradient at the scale of an
    independent logistic regression, so one learning rate serves all 13.
    """
    z = X @ weights.T + biases
    loss = float(np.mean(np.sum(np.logaddexp(0.0, z) - Y * z, axis=1)))
    dz = (_sigmoid(z) - Y) / z.shape[0]
    grad_w = dz.T @ X
    grad_b = dz.sum(axis=0)
    return loss, grad_w, grad_b


def dataset_loss(clf: LinearLabelClassifier, dataset: Dataset) -> float:
    loss, _, _ = loss_and_grad(clf.weights, clf.biases,
                               dataset.features_matrix(), dataset.labels_matrix())
    return loss


def train_classifier(split: DatasetSplit,
                     hyper: Hyperparams = Hyperparams()) -> tuple[LinearLabelClassifier, TrainReport]:
    """SGD over weighted-sampled minibatches of the train split.

    Every step draws batch_size classes from the inverse-frequency
    distribution, then one uniform frame per drawn class, so rare labels
    see gradient signal far more often than their raw rate.
    """
    hyper.validate()
    train = split.train
    if len(train) == 0:
        raise LabelError("empty training split")
    rng = np.random.default_rng(hyper.seed)
    X = train.features_matrix()
    Y = train.labels_matrix()
    clf = LinearLabelClassifier.zeros(X.shape[1])

    weights = class_weights(train)
    probs = np.array(weights.probabilities)
    pools = [np.nonzero(Y[:, i] > 0.5)[0] for i in range(NUM_LABELS)]
    if not all(pool.size for pool in pools):
        # Field corpora can lack a label entirely; sample only what exists.
        probs = np.where([pool.size > 0 for pool in pools], probs, 0.0)
        if probs.sum() <= 0:
            raise LabelError("no sampleable class in the training split")
        probs = probs / probs.sum()

    losses = [dataset_loss(clf, train)]
    steps_per_epoch = max(1, math.ceil(len(train) / hyper.batch_size))
    for _ in range(hyper.epochs):
        for _ in range(steps_per_epoch):
            classes = rng.choice(NUM_LABELS, size=hyper.batch_size, p=probs)
            rows = np.empty(hyper.batch_size, dtype=int)
            for k, c in enumerate(classes):
                pool = pools[c]
                rows[k] = pool[rng.integers(0, pool.size)]
            _, gw, gb = loss_and_grad(clf.weights, clf.biases, X[rows], Y[rows])
            clf.weights -= hyper.learning_rate * gw
            clf.biases -= hyper.learning_rate * gb
        losses.append(dataset_loss(clf, train))

    val_acc = {}
    if len(split.val):
        pred = clf.predict_batch(split.val.features_matrix())
        truth = split.val.labels_matrix() > 0.5
        per_label = (pred == truth).mean(axis=0)
        val_acc = {name: float(per_label[i]) for i, name in enumerate(LABELS)}
    report = TrainReport(epoch_losses=losses, val_accuracy=val_acc,
                         train_size=len(split.train), val_size=len(split.val),
                         test_size=len(split.test), seed=hyper.seed)
    return clf, report


# ---------------------------------------------------------------------------
# Synthetic corpora and persistence
# ---------------------------------------------------------------------------


def synthesize_frames(n: int, rng: np.random.Generator,
                      rates: Optional[dict] = None,
                      feature_noise: float = 0.05,
                      distractor_dim: int = 6) -> Dataset:
    """Build a separable synthetic corpus matching target per-frame label rates.

    Label counts hit round(rate * n) exactly for every class.  Features are
    the label bits plus Gaussian noise and a few distractor dimensions, so
    a linear classifier can recover the labels almost perfectly; frames are
    synthetic stand-ins for real observations, keyed by construction.
    """
    if n < 1:
        raise LabelError("need n >= 1")
    rates = dict(REFERENCE_LABEL_RATES if rates is None else rates)
    n_none = int(round(rates.get("none", 0.0) * n))
    n_rest = n - n_none
    label_sets: list[set[str]] = [set() for _ in range(n_rest)]
    pool = []
    for name in LABELS[1:]:
        pool.extend([name] * int(round(rates.get(name, 0.0) * n)))
    while len(pool) < n_rest:  # top up if the rates round short of one per frame
        pool.append(max(LABELS[1:], key=lambda s: rates.get(s, 0.0)))
    pool = [pool[i] for i in rng.permutation(len(pool))]
    primaries, extras = pool[:n_rest], pool[n_rest:]
    for i, name in enumerate(primaries):
        label_sets[i].add(name)
    cursor = 0
    for name in extras:
        for _ in range(n_rest):
            if name not in label_sets[cursor % n_rest]:
                label_sets[cursor % n_rest].add(name)
                cursor += 1
                break
            cursor += 1

    frames = []
    all_sets = [set()] * n_none + label_sets
    for i, names in enumerate(all_sets):
        labels = StateLabelSet.from_active(names)
        bits = labels.as_array()
        features = np.concatenate([
            bits + feature_noise * rng.standard_normal(NUM_LABELS),
            rng.standard_normal(distractor_dim),
        ])
        frames.append(LabeledFrame(features=features, labels=labels,
                                   episode="synthetic", tick=i))
    return Dataset(frames)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gridquest-dataset 1\n")
        for f in dataset:
            feats = " ".join(repr(float(v)) for v in f.features)
            fh.write(f"{f.labels.to_bits()}|{f.episode}|{f.tick}|{feats}\n")


def load_dataset(path) -> Dataset:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "gridquest-dataset 1":
            raise LabelError(f"unrecognised dataset header {header!r}")
        for line in fh:
            bits, episode, tick, feats = line.rstrip("\n").split("|", 3)
            frames.append(LabeledFrame(
                features=np.array([float(v) for v in feats.split()]),
                labels=StateLabelSet.from_bits(int(bits)),
                episode=episode, tick=int(tick)))
    return Dataset(frames)


def save_classifier(clf: LinearLabelClassifier, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"gridquest-classifier 1 dim={clf.weights.shape[1]} "
                 f"threshold={clf.threshold!r}\n")
        for row in clf.weights:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(" ".join(repr(float(v)) for v in clf.biases) + "\n")


def load_classifier(path) -> LinearLabelClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != ["gridquest-classifier", "1"]:
            raise LabelError("unrecognised classifier file")
        threshold = float(header[3].split("=", 1)[1])
        rows = [np.array([float(v) for v in fh.readline().split()])
                for _ in range(NUM_LABELS)]
        biases = np.array([float(v) for v in fh.readline().split()])
    return LinearLabelClassifier(np.stack(rows), biases, threshold)
