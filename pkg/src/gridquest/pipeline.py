"""The full headless study, end to end under one master seed.

Stages: scripted demonstrations, classifier and cloning training, replay
generation for every condition and task, simulated pairwise judgments, and
CSV exports.  Every random draw descends from the master seed, so rerunning
the pipeline reproduces each artifact byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import rating as ratingmod
from .control import CONDITIONS, AgentRuntime, run_episode
from .evalsim import sample_match, scripted_evaluator
from .perception import (FEATURE_DIM, Dataset, Hyperparams, LabeledFrame,
                         featurize, save_classifier, split_dataset,
                         train_classifier)
from .policy import (BCPolicy, BCTrainReport, DemoStep, DemoTrajectory,
                     bc_train, frame_to_action, save_demos, save_policy)
from .replay import ReplayStore, from_episode
from .world import PRIMARY_PREDICATE, TASKS, World, WorldConfig

__all__ = [
    "PipelineConfig",
    "PipelineResult",
    "collect_demonstrations",
    "export_results",
    "generate_replays",
    "run_demo_episode",
    "run_judgments",
    "run_pipeline",
    "train_models",
]

#: Subtasks whose frames feed the cloning corpus: free navigation only,
#: never scripted builds or geometric homing.
NAV_SUBTASKS = ("navigate_search", "go_to_feature")

#: Conditions driven by the trained navigation policy.
_POLICY_CONDITIONS = ("Hybrid", "BehaviorCloning")

#: Conditions whose state machine reads the trained label classifier.
_CLASSIFIER_CONDITIONS = ("Hybrid", "Engineered")


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str
    master_seed: int = 7
    demos_per_task: int = 12
    replays_per_cell: int = 10
    judgment_count: int = 268
    evaluator_count: int = 7
    frame_stride: int = 3
    max_ticks: int = 3000
    save_training_data: bool = False

    def validate(self):
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")
        for name in ("demos_per_task", "replays_per_cell", "evaluator_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.judgment_count < 0:
            raise ValueError("judgment_count must be >= 0")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")


@dataclass
class PipelineResult:
    out_dir: Path
    summary: dict
    combined: ratingmod.RatingStore
    per_task: dict


def _rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, *key]))


def _world_seeds(master_seed: int, stream: int, count: int) -> list:
    draws = _rng(master_seed, stream).integers(0, 2 ** 62, size=count)
    return [int(v) for v in draws]


def run_demo_episode(world: World, runtime: AgentRuntime, episode_id: str,
                      stride: int):
    """Drive one scripted demonstration, harvesting training data.

    Returns the navigation steps (cloning corpus), the per-tick labelled
    frames (classifier corpus, subsampled by ``stride``), and the outcome.
    """
    obs = world.observe()
    events: list = []
    steps = []
    frames = []
    tick = 0
    while not world.terminated:
        frame = runtime.tick(obs, events)
        nav = runtime.last_subtask in NAV_SUBTASKS
        name = frame_to_action(frame) if nav else None
        if tick % stride == 0 or name is not None:
            feats = featurize(obs)
            if tick % stride == 0:
                frames.append(LabeledFrame(features=feats, labels=runtime.labels,
                                           episode=episode_id, tick=tick))
            if name is not None:
                steps.append(DemoStep(features=feats, action=name))
        obs, events = world.step(frame)
        tick += 1
    assert world.outcome is not None
    return steps, frames, world.outcome


def collect_demonstrations(config: PipelineConfig):
    """Run the scripted demonstrator on fresh worlds for every task."""
    seeds = _world_seeds(config.master_seed, 1,
                         len(TASKS) * config.demos_per_task)
    demos = {task: [] for task in TASKS}
    frames: list = []
    demo_outcomes = {task: 0 for task in TASKS}
    for t, task in enumerate(TASKS):
        for i in range(config.demos_per_task):
            seed = seeds[t * config.demos_per_task + i]
            world = World(WorldConfig(seed=seed, task=task,
                                      max_ticks=config.max_ticks))
            runtime = AgentRuntime(world=world, condition="Human",
                                   rng=_rng(config.master_seed, 2, t, i))
            episode_id = f"demo-{task}-{i}"
            steps, episode_frames, outcome = run_demo_episode(
                world, runtime, episode_id, config.frame_stride)
            if steps:
                demos[task].append(DemoTrajectory(steps=tuple(steps),
                                                  episode=episode_id))
            frames.extend(episode_frames)
            demo_outcomes[task] += int(
                outcome.task_predicates[PRIMARY_PREDICATE[task]])
    return demos, Dataset(frames), demo_outcomes


def train_models(config: PipelineConfig, demos: dict, corpus: Dataset):
    """Fit the label classifier and one cloning policy per task."""
    split = split_dataset(corpus, seed=config.master_seed + 101)
    classifier, clf_report = train_classifier(
        split, Hyperparams(seed=config.master_seed + 102))
    policies = {}
    bc_reports = {}
    for t, task in enumerate(TASKS):
        seed = config.master_seed + 200 + t
        if any(len(traj) for traj in demos[task]):
            policies[task], bc_reports[task] = bc_train(demos[task], seed=seed)
        else:
            # A task whose search states all exit instantly (spawn already on
            # open ground) can demonstrate zero navigation; clone the uniform
            # policy rather than refusing to build the study.
            policies[task] = BCPolicy.zeros(FEATURE_DIM)
            bc_reports[task] = BCTrainReport(epoch_losses=[], train_accuracy=0.0,
                                             train_size=0, seed=seed)
    return classifier, clf_report, policies, bc_reports


def generate_replays(config: PipelineConfig, classifier, policies,
                     store: ReplayStore) -> dict:
    """Roll out every condition on shared per-task world seeds."""
    seeds = _world_seeds(config.master_seed, 3,
                         len(TASKS) * config.replays_per_cell)
    counts: dict = {}
    for t, task in enumerate(TASKS):
        for i in range(config.replays_per_cell):
            seed = seeds[t * config.replays_per_cell + i]
            for c, condition in enumerate(CONDITIONS):
                world = World(WorldConfig(seed=seed, task=task,
                                          max_ticks=config.max_ticks))
                runtime = AgentRuntime(
                    world=world, condition=condition,
                    rng=_rng(config.master_seed, 4, t, i, c),
                    bc_policy=policies[task] if condition in _POLICY_CONDITIONS
                    else None,
                    classifier=classifier if condition in _CLASSIFIER_CONDITIONS
                    else None)
                result = run_episode(world, runtime)
                store.save(from_episode(result, world.config))
                cell = counts.setdefault((task, condition),
                                         {"episodes": 0, "completed": 0,
                                          "snowball": 0})
                cell["episodes"] += 1
                cell["completed"] += int(
                    result.outcome.task_predicates[PRIMARY_PREDICATE[task]])
                cell["snowball"] += int(result.outcome.terminated_by_snowball)
    return counts


def run_judgments(config: PipelineConfig, store: ReplayStore):
    """Sample matches and have the scripted evaluator fill every form."""
    catalog = store.catalog()
    combined = ratingmod.RatingStore()
    per_task = {task: ratingmod.RatingStore() for task in sorted(catalog)}
    rng = _rng(config.master_seed, 5)
    judgments = []

    @lru_cache(maxsize=16)
    def load(replay_id):
        return store.load(replay_id)

    for j in range(config.judgment_count):
        match = sample_match(store, rng, created=j, catalog=catalog)
        replay_a = load(match.replay_a)
        replay_b = load(match.replay_b)
        combined.register_match(match.match_id, replay_a.condition,
                                replay_b.condition)
        per_task[match.task].register_match(match.match_id, replay_a.condition,
                                            replay_b.condition)
        evaluator = f"eval-{j % config.evaluator_count + 1}"
        judgment = scripted_evaluator(replay_a, replay_b, rng,
                                      match_id=match.match_id,
                                      evaluator=evaluator)
        ratingmod.ingest_judgment(combined, judgment)
        ratingmod.ingest_judgment(per_task[match.task], judgment)
        judgments.append((match, judgment))
    return combined, per_task, judgments


def export_results(out_dir: Path, combined: ratingmod.RatingStore,
                   per_task: dict) -> None:
    """Write the leaderboards, traces, and pairwise tables as CSV."""
    ratingmod.export_leaderboards(combined, out_dir / "leaderboard.csv")
    ratingmod.save_log(combined, out_dir / "matchlog.jsonl")

    with open(out_dir / "leaderboard_by_task.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", "condition", "mu", "sigma"])
        for task in sorted(per_task):
            for metric in ratingmod.METRICS:
                for name, rt in ratingmod.leaderboard(per_task[task], metric):
                    writer.writerow([task, metric, name,
                                     f"{rt.mu:.6f}", f"{rt.sigma:.6f}"])

    with open(out_dir / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "condition", "match_index", "mu", "sigma"])
        for metric in ratingmod.METRICS:
            for condition in sorted(combined.participants):
                for index, rt in ratingmod.rating_trace(combined, metric,
                                                        condition):
                    writer.writerow([metric, condition, index,
                                     f"{rt.mu:.6f}", f"{rt.sigma:.6f}"])

    with open(out_dir / "pairwise.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "condition_a", "condition_b",
                         "a_wins", "b_wins", "draws", "matches"])
        for metric in ratingmod.METRICS:
            table = ratingmod.pairwise_table(combined, metric)
            for (a, b) in sorted(table):
                row = table[(a, b)]
                writer.writerow([metric, a, b, f"{row['a_wins']:.6f}",
                                 f"{row['b_wins']:.6f}", f"{row['draws']:.6f}",
                                 row["matches"]])


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    demos, corpus, demo_outcomes = collect_demonstrations(config)
    classifier, clf_report, policies, bc_reports = train_models(
        config, demos, corpus)

    models_dir = out_dir / "models"
    models_dir.mkdir(exist_ok=True)
    save_classifier(classifier, models_dir / "classifier.txt")
    for task in TASKS:
        save_policy(policies[task], models_dir / f"bc_{task}.txt")
    if config.save_training_data:
        from .perception import save_dataset
        save_dataset(corpus, out_dir / "corpus.txt")
        for task in TASKS:
            save_demos(demos[task], out_dir / f"demos_{task}.txt")

    store = ReplayStore(out_dir / "replays")
    run_counts = generate_replays(config, classifier, policies, store)
    combined, per_task, judgments = run_judgments(config, store)
    export_results(out_dir, combined, per_task)

    with open(out_dir / "judgments.jsonl", "w", encoding="utf-8") as fh:
        for match, judgment in judgments:
            fh.write(json.dumps({
                "match": match.match_id, "task": match.task,
                "replay_a": match.replay_a, "replay_b": match.replay_b,
                "created": match.created, "evaluator": judgment.evaluator,
                "answers": list(judgment.answers),
            }, sort_keys=True) + "\n")

    summary = {
        "master_seed": config.master_seed,
        "demo_completions": demo_outcomes,
        "corpus_frames": len(corpus),
        "classifier_val_accuracy": clf_report.val_accuracy,
        "bc_train_accuracy": {task: bc_reports[task].train_accuracy
                              for task in TASKS},
        "replays": {f"{task}/{cond}": cell
                    for (task, cond), cell in sorted(run_counts.items())},
        "judgments": len(judgments),
        "leaderboards": {
            metric: [[name, round(rt.mu, 6), round(rt.sigma, 6)]
                     for name, rt in ratingmod.leaderboard(combined, metric)]
            for metric in ratingmod.METRICS},
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return PipelineResult(out_dir=out_dir, summary=summary, combined=combined,
                          per_task=per_task)
