"""Command-line entry point.

Subcommands:

    run       roll out episodes and write replay files
    train     fit the label classifier or a cloning policy from corpus files
    serve     start the evaluation HTTP service
    eval-sim  run the whole headless study under one master seed
    export    rebuild CSV exports from a persisted match log
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import rating as ratingmod
from .control import CONDITIONS, AgentRuntime, run_episode
from .perception import (Dataset, Hyperparams, load_classifier, load_dataset,
                         save_classifier, save_dataset, split_dataset,
                         train_classifier, loss_and_grad)
from .pipeline import (PipelineConfig, export_results, run_demo_episode,
                       run_pipeline)
from .policy import (bc_train, load_demos, save_demos, save_policy,
                     softmax_loss_and_grad, ACTION_INDEX)
from .replay import ReplayStore, from_episode
from .service import EvalService, serve_forever
from .world import PRIMARY_PREDICATE, TASKS, World, WorldConfig

__all__ = ["main"]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _classifier_gradient_check(X, Y, rng, coords: int = 40,
                               step: float = 1e-6) -> float:
    """Central-difference spot check of the logistic gradient."""
    dim = X.shape[1]
    from .perception import NUM_LABELS, LinearLabelClassifier
    weights = rng.normal(scale=0.1, size=(NUM_LABELS, dim))
    biases = rng.normal(scale=0.1, size=NUM_LABELS)
    _, gw, gb = loss_and_grad(weights, biases, X, Y)
    worst = 0.0
    for _ in range(coords):
        i = int(rng.integers(NUM_LABELS))
        j = int(rng.integers(dim))
        bumped = weights.copy()
        bumped[i, j] += step
        up, _, _ = loss_and_grad(bumped, biases, X, Y)
        bumped[i, j] -= 2 * step
        down, _, _ = loss_and_grad(bumped, biases, X, Y)
        numeric = (up - down) / (2 * step)
        worst = max(worst, _max_relative_error(np.array(gw[i, j]),
                                               np.array(numeric)))
    return worst


def _policy_gradient_check(X, y, rng, coords: int = 40,
                           step: float = 1e-6) -> float:
    from .policy import DISCRETE_ACTIONS
    n_actions = len(DISCRETE_ACTIONS)
    dim = X.shape[1]
    weights = rng.normal(scale=0.1, size=(n_actions, dim))
    biases = rng.normal(scale=0.1, size=n_actions)
    _, gw, _ = softmax_loss_and_grad(weights, biases, X, y)
    worst = 0.0
    for _ in range(coords):
        i = int(rng.integers(n_actions))
        j = int(rng.integers(dim))
        bumped = weights.copy()
        bumped[i, j] += step
        up, _, _ = softmax_loss_and_grad(bumped, biases, X, y)
        bumped[i, j] -= 2 * step
        down, _, _ = softmax_loss_and_grad(bumped, biases, X, y)
        numeric = (up - down) / (2 * step)
        worst = max(worst, _max_relative_error(np.array(gw[i, j]),
                                               np.array(numeric)))
    return worst


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    tasks = [args.task] if args.task else list(TASKS)
    conditions = [args.condition] if args.condition else list(CONDITIONS)
    if args.demos_out and conditions != ["Human"]:
        print("--demos-out requires --condition Human", file=sys.stderr)
        return 2

    classifier = None
    policies = {}
    if args.models:
        models = Path(args.models)
        clf_path = models / "classifier.txt"
        if clf_path.exists():
            classifier = load_classifier(clf_path)
        for task in tasks:
            policy_path = models / f"bc_{task}.txt"
            if policy_path.exists():
                from .policy import load_policy
                policies[task] = load_policy(policy_path)

    store = ReplayStore(args.out)
    demo_frames: dict = {task: [] for task in tasks}
    demo_trajs: dict = {task: [] for task in tasks}
    for task in tasks:
        for i in range(args.count):
            seed = args.seed + i
            for c, condition in enumerate(conditions):
                world = World(WorldConfig(seed=seed, task=task,
                                          max_ticks=args.max_ticks))
                rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
                runtime = AgentRuntime(
                    world=world, condition=condition, rng=rng,
                    bc_policy=policies.get(task) if condition in
                    ("Hybrid", "BehaviorCloning") else None,
                    classifier=classifier if condition in
                    ("Hybrid", "Engineered") else None)
                if args.demos_out:
                    steps, frames, outcome = run_demo_episode(
                        world, runtime, f"demo-{task}-{seed}", args.stride)
                    demo_frames[task].extend(frames)
                    if steps:
                        from .policy import DemoTrajectory
                        demo_trajs[task].append(DemoTrajectory(
                            steps=tuple(steps), episode=f"demo-{task}-{seed}"))
                    done = outcome.task_predicates[PRIMARY_PREDICATE[task]]
                    print(f"{task} {condition} seed={seed} "
                          f"ticks={outcome.ticks_elapsed} completed={done}")
                    continue
                result = run_episode(world, runtime)
                rid = store.save(from_episode(result, world.config))
                done = result.outcome.task_predicates[PRIMARY_PREDICATE[task]]
                print(f"{rid} ticks={result.outcome.ticks_elapsed} "
                      f"completed={done} "
                      f"snowball={result.outcome.terminated_by_snowball}")

    if args.demos_out:
        out = Path(args.demos_out)
        out.mkdir(parents=True, exist_ok=True)
        for task in tasks:
            save_dataset(Dataset(demo_frames[task]),
                         out / f"corpus_{task}.txt")
            save_demos(demo_trajs[task], out / f"demos_{task}.txt")
            print(f"{task}: {len(demo_frames[task])} frames, "
                  f"{len(demo_trajs[task])} trajectories -> {out}")
    return 0


def cmd_train(args) -> int:
    for path in args.corpus:
        if not Path(path).exists():
            print(f"corpus file not found: {path}", file=sys.stderr)
            return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed + 1)

    if args.what == "classifier":
        frames = []
        for path in args.corpus:
            frames.extend(load_dataset(path).frames)
        dataset = Dataset(frames)
        split = split_dataset(dataset, seed=args.seed)
        clf, report = train_classifier(split, Hyperparams(seed=args.seed))
        save_classifier(clf, out)
        X = split.train.features_matrix()[:64]
        Y = split.train.labels_matrix()[:64]
        grad_err = _classifier_gradient_check(X, Y, rng)
        payload = {
            "artifact": str(out),
            "artifact_sha256": _sha256(out),
            "seed": args.seed,
            "split_sizes": [report.train_size, report.val_size,
                            report.test_size],
            "epoch_losses": report.epoch_losses,
            "val_accuracy": report.val_accuracy,
            "gradient_check_max_rel_err": grad_err,
            "gradient_check_pass": grad_err < 1e-5,
        }
    else:
        demos = []
        for path in args.corpus:
            demos.extend(load_demos(path))
        policy, report = bc_train(demos, seed=args.seed)
        save_policy(policy, out)
        steps = [s for traj in demos for s in traj.steps][:64]
        X = np.stack([s.features for s in steps])
        y = np.array([ACTION_INDEX[s.action] for s in steps])
        grad_err = _policy_gradient_check(X, y, rng)
        payload = {
            "artifact": str(out),
            "artifact_sha256": _sha256(out),
            "seed": args.seed,
            "train_size": report.train_size,
            "epoch_losses": report.epoch_losses,
            "train_accuracy": report.train_accuracy,
            "gradient_check_max_rel_err": grad_err,
            "gradient_check_pass": grad_err < 1e-5,
        }

    report_path = out.with_suffix(out.suffix + ".report.json")
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0 if payload["gradient_check_pass"] else 1


def cmd_serve(args) -> int:
    host, _, port = args.bind.rpartition(":")
    store = ReplayStore(args.replays)
    rng = (np.random.default_rng(args.seed) if args.seed is not None
           else np.random.default_rng())
    service = EvalService(store, args.data, rng=rng)
    serve_forever(service, host or "127.0.0.1", int(port))
    return 0


def cmd_eval_sim(args) -> int:
    config = PipelineConfig(
        out_dir=args.out, master_seed=args.seed,
        demos_per_task=args.demos_per_task,
        replays_per_cell=args.replays_per_cell,
        judgment_count=args.judgments,
        evaluator_count=args.evaluators,
        frame_stride=args.stride, max_ticks=args.max_ticks,
        save_training_data=args.save_training_data)
    result = run_pipeline(config)
    for metric in ratingmod.METRICS:
        order = " > ".join(name for name, _, _ in
                           result.summary["leaderboards"][metric])
        print(f"{metric}: {order}")
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_export(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = data / "matchlog.jsonl"
    combined = (ratingmod.load_log(log_path) if log_path.exists()
                else ratingmod.RatingStore())

    per_task: dict = {}
    judgments_path = data / "judgments.jsonl"
    if judgments_path.exists():
        for line in judgments_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            task = record["task"]
            store = per_task.setdefault(task, ratingmod.RatingStore())
            player_a, player_b = combined.matches[record["match"]]
            store.register_match(record["match"], player_a, player_b)
            ratingmod.ingest_judgment(store, ratingmod.Judgment(
                record["match"], record["evaluator"],
                tuple(record["answers"])))
    export_results(out, combined, per_task)
    print(f"wrote CSV bundle to {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridquest",
        description="Deterministic task-agent testbed with a human-feedback "
                    "rating pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="roll out episodes and write replays")
    run.add_argument("--task", choices=TASKS)
    run.add_argument("--condition", choices=CONDITIONS)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--count", type=int, default=1)
    run.add_argument("--out", default="replays")
    run.add_argument("--models", help="directory with trained artifacts")
    run.add_argument("--max-ticks", type=int, default=3000)
    run.add_argument("--demos-out",
                     help="collect training corpora instead of replays "
                          "(Human condition only)")
    run.add_argument("--stride", type=int, default=3,
                     help="classifier frame subsampling when collecting demos")
    run.set_defaults(func=cmd_run)

    train = sub.add_parser("train", help="fit a model from corpus files")
    train.add_argument("what", choices=("classifier", "bc"))
    train.add_argument("--corpus", nargs="+", required=True)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    serve = sub.add_parser("serve", help="start the evaluation service")
    serve.add_argument("--replays", default="replays")
    serve.add_argument("--data", default="service-data")
    serve.add_argument("--bind", default="127.0.0.1:8008")
    serve.add_argument("--seed", type=int)
    serve.set_defaults(func=cmd_serve)

    evalsim = sub.add_parser("eval-sim", help="run the full headless study")
    evalsim.add_argument("--out", default="study")
    evalsim.add_argument("--seed", type=int, default=7)
    evalsim.add_argument("--demos-per-task", type=int, default=12)
    evalsim.add_argument("--replays-per-cell", type=int, default=10)
    evalsim.add_argument("--judgments", type=int, default=268)
    evalsim.add_argument("--evaluators", type=int, default=7)
    evalsim.add_argument("--stride", type=int, default=3)
    evalsim.add_argument("--max-ticks", type=int, default=3000)
    evalsim.add_argument("--save-training-data", action="store_true")
    evalsim.set_defaults(func=cmd_eval_sim)

    export = sub.add_parser("export", help="rebuild CSVs from a match log")
    export.add_argument("--data", default="study")
    export.add_argument("--out", default="study")
    export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
