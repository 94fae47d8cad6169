"""Discrete navigation actions and the policies that emit them.

Navigation everywhere in the package happens through a 7-way discrete
alphabet (three forward gaits, two 15 degree turns, a standing jump, and a
no-op) rather than raw control frames.  ``action_to_frame`` gives each
action a canonical frame; ``frame_to_action`` maps any frame that stays
within the movement-and-yaw subset back to its action, so demonstration
replays can be distilled into training data.

Three interchangeable sources of actions live here: a linear softmax
policy trained by behaviour cloning, a tunable random explorer, and a
ground-truth navigator that walks straight at true world coordinates (the
scripted stand-in for a human player; real agents never touch it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .odometry import wrap_relative
from .world import ActionFrame

DISCRETE_ACTIONS = (
    "forward_walk",
    "forward_sprint",
    "forward_sprint_jump",
    "turn_left_15",
    "turn_right_15",
    "jump_in_place",
    "noop",
)
ACTION_INDEX = {name: i for i, name in enumerate(DISCRETE_ACTIONS)}
TURN_STEP_DEGREES = 15.0

# Walking frames carry jump=True: jumping does not change walking speed but
# lets the mover climb one-block rises, which keeps gaits terrain-agnostic.
_CANONICAL_FRAMES = {
    "forward_walk": ActionFrame(forward=True, jump=True),
    "forward_sprint": ActionFrame(forward=True, sprint=True),
    "forward_sprint_jump": ActionFrame(forward=True, sprint=True, jump=True),
    "turn_left_15": ActionFrame(camera_yaw_delta=-TURN_STEP_DEGREES),
    "turn_right_15": ActionFrame(camera_yaw_delta=TURN_STEP_DEGREES),
    "jump_in_place": ActionFrame(jump=True),
    "noop": ActionFrame(),
}


class PolicyError(ValueError):
    pass


def action_to_frame(name: str) -> ActionFrame:
    try:
        return _CANONICAL_FRAMES[name]
    except KeyError:
        raise PolicyError(f"unknown discrete action {name!r}") from None


def frame_to_action(frame: ActionFrame) -> Optional[str]:
    """Name the discrete action a frame encodes, or None if it falls outside.

    Frames using strafing, backward movement, pitch, item interactions, or
    yaw deltas other than +-15 have no discrete name.  A plain forward
    frame maps to forward_walk whether or not it jumps.
    """
    if (frame.back or frame.left or frame.right or frame.use_item
            or frame.place_block or frame.throw_snowball or frame.equip is not None
            or frame.camera_pitch_delta != 0.0):
        return None
    yaw = frame.camera_yaw_delta
    if yaw != 0.0:
        if frame.forward or frame.jump or frame.sprint:
            return None
        if yaw == -TURN_STEP_DEGREES:
            return "turn_left_15"
        if yaw == TURN_STEP_DEGREES:
            return "turn_right_15"
        return None
    if frame.forward:
        if frame.sprint:
            return "forward_sprint_jump" if frame.jump else "forward_sprint"
        return "forward_walk"
    if frame.sprint:
        return None
    if frame.jump:
        return "jump_in_place"
    return "noop"


# ---------------------------------------------------------------------------
# Behaviour cloning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DemoStep:
    """One imitation example: observation features and the action taken."""

    features: np.ndarray
    action: str


@dataclass(frozen=True)
class DemoTrajectory:
    steps: tuple
    episode: str = ""

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class BCPolicy:
    """Linear softmax policy over the discrete action alphabet."""

    weights: np.ndarray  # (num_actions, D)
    biases: np.ndarray   # (num_actions,)

    @classmethod
    def zeros(cls, feature_dim: int) -> "BCPolicy":
        n = len(DISCRETE_ACTIONS)
        return cls(np.zeros((n, feature_dim)), np.zeros(n))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.biases

    def action_probabilities(self, features: np.ndarray,
                             temperature: float = 1.0) -> np.ndarray:
        if temperature <= 0:
            raise PolicyError("temperature must be positive")
        z = self.logits(features) / temperature
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def sample(self, features: np.ndarray, rng: np.random.Generator,
               temperature: float = 1.0) -> str:
        p = self.action_probabilities(features, temperature)
        return DISCRETE_ACTIONS[int(rng.choice(len(DISCRETE_ACTIONS), p=p))]

    def greedy(self, features: np.ndarray) -> str:
        return DISCRETE_ACTIONS[int(np.argmax(self.logits(features)))]


def softmax_loss_and_grad(weights: np.ndarray, biases: np.ndarray,
                          X: np.ndarray, y_idx: np.ndarray):
    """Mean cross-entropy of the softmax policy and its gradient."""
    z = X @ weights.T + biases
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = X.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y_idx]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y_idx] -= 1.0
    p /= n
    return loss, p.T @ X, p.sum(axis=0)


@dataclass
class BCTrainReport:
    epoch_losses: list
    train_accuracy: float
    train_size: int
    seed: int


def bc_train(demos: Sequence[DemoTrajectory], learning_rate: float = 0.05,
             batch_size: int = 32, epochs: int = 5, seed: int = 0
             ) -> tuple[BCPolicy, BCTrainReport]:
    """Fit the softmax policy to demonstration steps with minibatch SGD."""
    steps = [s for traj in demos for s in traj.steps]
    if not steps:
        raise PolicyError("no demonstration steps to train on")
    X = np.stack([s.features for s in steps])
    y = np.array([ACTION_INDEX[s.action] for s in steps])
    rng = np.random.default_rng(seed)
    policy = BCPolicy.zeros(X.shape[1])

    def full_loss():
        loss, _, _ = softmax_loss_and_grad(policy.weights, policy.biases, X, y)
        return loss

    losses = [full_loss()]
    n = len(steps)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    for _ in range(epochs):
        order = rng.permutation(n)
        for k in range(steps_per_epoch):
            rows = order[k * batch_size:(k + 1) * batch_size]
            if rows.size == 0:
                rows = order[-batch_size:]
            _, gw, gb = softmax_loss_and_grad(policy.weights, policy.biases,
                                              X[rows], y[rows])
            policy.weights -= learning_rate * gw
            policy.biases -= learning_rate * gb
        losses.append(full_loss())
    accuracy = float(np.mean(np.argmax(policy.logits(X), axis=1) == y))
    return policy, BCTrainReport(epoch_losses=losses, train_accuracy=accuracy,
                                 train_size=n, seed=seed)


# ---------------------------------------------------------------------------
# Random exploration
# ---------------------------------------------------------------------------

#: Default mix for the random explorer: mostly forward motion so it covers
#: ground, with enough jumping gaits to climb one-block rises.
EXPLORER_DISTRIBUTION = {
    "forward_walk": 0.35,
    "forward_sprint": 0.10,
    "forward_sprint_jump": 0.15,
    "turn_left_15": 0.15,
    "turn_right_15": 0.15,
    "jump_in_place": 0.05,
    "noop": 0.05,
}


def sample_explorer_action(rng: np.random.Generator,
                           distribution: Optional[dict] = None) -> str:
    dist = EXPLORER_DISTRIBUTION if distribution is None else distribution
    names = list(dist)
    probs = np.array([dist[name] for name in names], dtype=float)
    if (probs < 0).any() or probs.sum() <= 0:
        raise PolicyError("explorer distribution must be non-negative and non-empty")
    unknown = set(names).difference(DISCRETE_ACTIONS)
    if unknown:
        raise PolicyError(f"explorer distribution names unknown actions: {sorted(unknown)}")
    probs = probs / probs.sum()
    return names[int(rng.choice(len(names), p=probs))]


# ---------------------------------------------------------------------------
# Ground-truth navigation (demonstrations only)
# ---------------------------------------------------------------------------


@dataclass
class GroundTruthNavigator:
    """Walks toward true world coordinates, skirting obstacles on contact.

    This is the scripted stand-in for a human player: it reads the real
    agent position, which no learned or engineered policy is allowed to
    do.  When a step was blocked it queues a short fixed detour (quarter
    turn, a few paces) before re-aiming at the goal.
    """

    goal: tuple
    arrive_radius: float = 0.8
    sprint_range: float = 8.0
    follow_window: int = 40
    _queue: list = field(default_factory=list)
    _tick: int = 0
    _follow_until: int = 0

    def done(self, x: float, y: float) -> bool:
        return math.hypot(self.goal[0] - x, self.goal[1] - y) <= self.arrive_radius

    def next_action(self, x: float, y: float, heading: float,
                    blocked_last: bool = False) -> str:
        self._tick += 1
        if blocked_last and not self._queue:
            # Detour consistently to one side: repeated same-side detours
            # walk the agent around a closed obstacle until the direct line
            # opens up, where alternating sides would oscillate in a pocket.
            self._queue = ["turn_right_15"] * 6 + ["forward_walk"] * 5
            self._follow_until = self._tick + self.follow_window
        if self._queue:
            return self._queue.pop(0)
        if self._tick < self._follow_until:
            # Recently blocked: hug the obstacle instead of re-aiming, or a
            # pull toward the goal cancels every detour and the walker
            # oscillates on the far side of a closed ring.  Probing back
            # toward the wall rounds corners and finds gaps (right-hand
            # rule); a clean stretch with no contact ends follow mode.
            self._queue = ["turn_left_15"] * 6 + ["forward_walk"] * 5
            return self._queue.pop(0)
        dx = self.goal[0] - x
        dy = self.goal[1] - y
        dist = math.hypot(dx, dy)
        rel = wrap_relative(math.degrees(math.atan2(dx, dy)) - heading)
        if abs(rel) > TURN_STEP_DEGREES / 2:
            return "turn_left_15" if rel < 0 else "turn_right_15"
        if dist > self.sprint_range:
            return "forward_sprint_jump"
        return "forward_walk"


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_policy(policy: BCPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"gridquest-policy 1 dim={policy.weights.shape[1]}\n")
        for row in policy.weights:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(" ".join(repr(float(v)) for v in policy.biases) + "\n")


def load_policy(path) -> BCPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != ["gridquest-policy", "1"]:
            raise PolicyError("unrecognised policy file")
        rows = [np.array([float(v) for v in fh.readline().split()])
                for _ in range(len(DISCRETE_ACTIONS))]
        biases = np.array([float(v) for v in fh.readline().split()])
    return BCPolicy(np.stack(rows), biases)


def save_demos(demos: Sequence[DemoTrajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gridquest-demos 1\n")
        for traj in demos:
            fh.write(f"trajectory|{traj.episode}|{len(traj.steps)}\n")
            for step in traj.steps:
                feats = " ".join(repr(float(v)) for v in step.features)
                fh.write(f"{step.action}|{feats}\n")


def load_demos(path) -> list:
    demos = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "gridquest-demos 1":
            raise PolicyError(f"unrecognised demo file header {header!r}")
        for line in fh:
            kind, episode, count = line.rstrip("\n").split("|")
            if kind != "trajectory":
                raise PolicyError(f"expected a trajectory record, got {kind!r}")
            steps = []
            for _ in range(int(count)):
                action, feats = fh.readline().rstrip("\n").split("|", 1)
                if action not in ACTION_INDEX:
                    raise PolicyError(f"unknown action {action!r}")
                steps.append(DemoStep(
                    features=np.array([float(v) for v in feats.split()]),
                    action=action))
            demos.append(DemoTrajectory(steps=tuple(steps), episode=episode))
    return demos
