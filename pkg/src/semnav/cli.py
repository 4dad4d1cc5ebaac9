"""Command-line entry points: world generation, dataset collection,
single episodes, navigation suites, and prediction evaluation."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .controller import MpcConfig
from .costfield import action_prediction_accuracy, fuse_costmap, occupancy_metrics
from .harness import SuiteConfig, run_episode, run_suite, sample_episode
from .mapping import pool_stack
from .predictor import FrontierProvider, PredictionRequest, RemoteProvider
from .world import WorldGenParams, generate_world

_SPLIT_DEFAULTS = {"train": (36, 100), "val": (4, 200), "test": (8, 300)}


def _add_mpc_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("controller")
    group.add_argument("--horizon", type=int, default=50)
    group.add_argument("--samples", type=int, default=256)
    group.add_argument("--lambda", dest="temperature", type=float, default=0.5)
    group.add_argument("--sigma", type=float, default=0.35)
    group.add_argument("--q-v", type=float, default=0.1)
    group.add_argument("--q-omega", type=float, default=0.05)
    group.add_argument("--dt", type=float, default=0.1)
    group.add_argument("--theta-cost", type=float, default=0.2,
                       help="goal-reacher done threshold on the normalized field")
    group.add_argument("--theta-occ", type=float, default=0.5,
                       help="occupancy threshold for cost-map fusion")


def _mpc_from_args(args) -> MpcConfig:
    return MpcConfig(
        horizon=args.horizon,
        samples=args.samples,
        temperature=args.temperature,
        noise_sigma=args.sigma,
        q_v=args.q_v,
        q_omega=args.q_omega,
        dt=args.dt,
    )


def _add_worldgen_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("world generation")
    group.add_argument("--width", type=int, default=192)
    group.add_argument("--height", type=int, default=192)
    group.add_argument("--resolution", type=float, default=0.05)
    group.add_argument("--rooms", type=int, default=6)
    group.add_argument("--object-density", type=float, default=0.14)


def _worldgen_from_args(args) -> WorldGenParams:
    return WorldGenParams(
        width=args.width,
        height=args.height,
        resolution=args.resolution,
        rooms=args.rooms,
        object_density=args.object_density,
    )


def _cmd_gen_world(args) -> int:
    world = generate_world(args.seed, _worldgen_from_args(args))
    world.save(args.out)
    print(f"wrote {args.out}: {world.width}x{world.height} cells, seed {args.seed}")
    return 0


def _cmd_collect(args) -> int:
    from .dataset import build_split

    n_worlds, seed_base = _SPLIT_DEFAULTS.get(args.split, (4, 400))
    if args.worlds is not None:
        n_worlds = args.worlds
    if args.seed_base is not None:
        seed_base = args.seed_base
    seeds = [seed_base + k for k in range(n_worlds)]
    manifest = build_split(
        seeds,
        args.episodes_per_world,
        args.split,
        args.out,
        worldgen=_worldgen_from_args(args),
        mpc_cfg=_mpc_from_args(args),
        split_seed=args.split_seed,
        max_steps=args.max_steps,
    )
    print(
        f"split {args.split}: {manifest.counts['episodes']} episodes, "
        f"{manifest.counts['samples']} samples under {args.out}"
    )
    return 0


def _cmd_run(args) -> int:
    worldgen = _worldgen_from_args(args)
    world = generate_world(args.world_seed, worldgen)
    rng = np.random.default_rng([np.uint64(args.seed), np.uint64(args.world_seed)])
    episode = sample_episode(world, rng, max_steps=args.max_steps)
    if args.target is not None:
        if not world.class_cells(args.target).any():
            print(f"world {args.world_seed} has no {args.target!r}; regenerate or pick another",
                  file=sys.stderr)
            return 2
        episode = dataclasses.replace(episode, target=args.target)
    result = run_episode(
        world,
        episode,
        agent=args.agent,
        seed=args.seed,
        mpc=_mpc_from_args(args),
        theta_occ=args.theta_occ,
        theta_cost=args.theta_cost,
        endpoint=args.endpoint,
    )
    summary = {
        "agent": result.agent,
        "target": result.target,
        "success": result.success,
        "declared_done": result.declared_done,
        "steps": result.steps,
        "time_s": result.time_seconds,
        "path_length_m": result.path_length,
        "shortest_length_m": result.shortest_length,
        "spl_term": result.spl_term,
        "dts_m": result.dts,
        "failure_reason": result.failure_reason,
    }
    print(json.dumps(summary, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1))
    if args.render:
        from .render import render_episode

        render_episode(world, result, args.render)
        print(f"render written to {args.render}")
    return 0 if result.success else 1


def _cmd_eval_nav(args) -> int:
    if args.suite:
        config = SuiteConfig.from_json(json.loads(Path(args.suite).read_text()))
    else:
        config = SuiteConfig(
            agents=tuple(args.agents.split(",")),
            world_seeds=tuple(range(args.seed_base, args.seed_base + args.worlds)),
            episodes_per_world=args.episodes_per_world,
            worldgen=_worldgen_from_args(args),
            mpc=_mpc_from_args(args),
            theta_occ=args.theta_occ,
            theta_cost=args.theta_cost,
            endpoint=args.endpoint,
            workers=args.workers,
            render=args.render,
        )

    def progress(done, total):
        if done % 10 == 0 or done == total:
            print(f"  {done}/{total} episodes", file=sys.stderr)

    report = run_suite(config, out_dir=args.out, progress=progress)
    print(json.dumps(report.summary()["agents"], indent=1))
    print(f"report written to {args.out}")
    return 0


def _request_from_sample(sample) -> PredictionRequest:
    from .predictor import orientation_bin  # bins recomputed from the stored pose

    return PredictionRequest(
        local=sample.local,
        global_pooled=pool_stack(sample.global_stack, sample.global_stack.shape[1] // sample.local.shape[1]),
        target_index=_target_index(sample.target),
        orientation_bin=orientation_bin(sample.pose[2]),
        ray_depth=sample.ray_depth,
        ray_class=sample.ray_class,
        episode_id=sample.episode_id,
        step_id=sample.step_id,
    )


def _target_index(target: str) -> int:
    from .world import class_id

    return class_id(target) - 2


def _cmd_eval_pred(args) -> int:
    import csv

    from .dataset import DatasetManifest, load_sample

    data_dir = Path(args.data)
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    remote = RemoteProvider(args.endpoint) if args.predictor == "remote" else None
    rows = []
    try:
        for rel in manifest.samples:
            sample = load_sample(data_dir / rel)
            request = _request_from_sample(sample)
            provider = remote or FrontierProvider(sample.target)
            response = provider.predict(request)
            occ_gt = sample.occ > 0.5
            occ_hat = response.occ >= args.theta_occ
            om = occupancy_metrics(occ_gt, occ_hat)
            gt_cm = fuse_costmap(sample.occ, sample.nav, args.theta_occ)
            pred_cm = fuse_costmap(response.occ, response.nav, args.theta_occ)
            rows.append(
                {
                    "sample": rel,
                    "mpa": om["mpa"],
                    "mf1": om["mf1"],
                    "miou": om["miou"],
                    "aap5": action_prediction_accuracy(gt_cm, pred_cm, 5),
                    "aap9": action_prediction_accuracy(gt_cm, pred_cm, 9),
                }
            )
    finally:
        if remote is not None:
            remote.close()
    if not rows:
        print("no samples in manifest", file=sys.stderr)
        return 2
    fieldnames = ["sample", "mpa", "mf1", "miou", "aap5", "aap9"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    means = {k: float(np.mean([r[k] for r in rows])) for k in fieldnames[1:]}
    print(json.dumps({"samples": len(rows), "means": means}, indent=1))
    print(f"metrics written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a world and save it as JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_worldgen_flags(p)
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("collect", help="collect an expert-trajectory dataset split")
    p.add_argument("--split", default="train")
    p.add_argument("--worlds", type=int, default=None,
                   help="world count (defaults: train 36, val 4, test 8)")
    p.add_argument("--episodes-per-world", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-base", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=500)
    _add_worldgen_flags(p)
    _add_mpc_flags(p)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("run", help="run a single episode")
    p.add_argument("--agent", choices=("gt", "frontier", "remote", "random"), default="gt")
    p.add_argument("--world-seed", type=int, required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--endpoint", default=None,
                   help="remote predictor: host:port or cmd:<command line>")
    p.add_argument("--render", default=None, metavar="PNG")
    p.add_argument("--out", default=None, metavar="JSON")
    _add_worldgen_flags(p)
    _add_mpc_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval-nav", help="run a navigation suite and write reports")
    p.add_argument("--suite", default=None, help="suite config JSON (overrides flags)")
    p.add_argument("--out", required=True)
    p.add_argument("--agents", default="gt,frontier,random")
    p.add_argument("--worlds", type=int, default=8)
    p.add_argument("--seed-base", type=int, default=1)
    p.add_argument("--episodes-per-world", type=int, default=40)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--render", action="store_true")
    p.add_argument("--endpoint", default=None)
    _add_worldgen_flags(p)
    _add_mpc_flags(p)
    p.set_defaults(func=_cmd_eval_nav)

    p = sub.add_parser("eval-pred", help="score a predictor against dataset ground truth")
    p.add_argument("--data", required=True, help="split directory holding manifest.json")
    p.add_argument("--predictor", choices=("frontier", "remote"), default="frontier")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--theta-occ", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval_pred)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
