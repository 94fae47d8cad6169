"""gridquest: a deterministic block-world sandbox for hybrid task agents.

The package simulates a small Minecraft-like grid world, runs agents that
mix learned navigation with engineered subtask state machines, and rates
them from pairwise judgments the way a human study would.
"""

from .control import CONDITIONS, AgentRuntime, EpisodeResult, run_episode
from .evalsim import MatchRequest, sample_match, scripted_evaluator
from .odometry import FeatureMap, Pose, SpeedModel, export_map, update
from .perception import (
    LinearLabelClassifier,
    StateLabelSet,
    featurize,
    oracle_labels,
    train_classifier,
)
from .pipeline import PipelineConfig, run_pipeline
from .policy import BCPolicy, bc_train
from .rating import (
    Judgment,
    MatchOutcome,
    Rating,
    RatingConfig,
    RatingStore,
    ingest_judgment,
    leaderboard,
    update_pair,
)
from .replay import Replay, ReplayStore, parse_replay, serialize_replay
from .service import EvalService, make_server
from .world import (
    ActionFrame,
    EpisodeOutcome,
    Observation,
    World,
    WorldConfig,
    generate_world,
)

__all__ = [
    "ActionFrame",
    "AgentRuntime",
    "BCPolicy",
    "CONDITIONS",
    "EpisodeOutcome",
    "EpisodeResult",
    "EvalService",
    "FeatureMap",
    "Judgment",
    "LinearLabelClassifier",
    "MatchOutcome",
    "MatchRequest",
    "Observation",
    "PipelineConfig",
    "Pose",
    "Rating",
    "RatingConfig",
    "RatingStore",
    "Replay",
    "ReplayStore",
    "SpeedModel",
    "StateLabelSet",
    "World",
    "WorldConfig",
    "bc_train",
    "export_map",
    "featurize",
    "generate_world",
    "ingest_judgment",
    "leaderboard",
    "make_server",
    "oracle_labels",
    "parse_replay",
    "run_episode",
    "run_pipeline",
    "sample_match",
    "scripted_evaluator",
    "serialize_replay",
    "train_classifier",
    "update",
    "update_pair",
]

__version__ = "0.1.0"
