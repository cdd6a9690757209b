"""Command-line entry point.

Subcommands: gen-scenes, gen-data, train, sample, plan, evaluate, ablate.
Every command takes --config (JSON), --seed, --out, and repeatable
--override key=value flags; overrides win over the file. Exit code 0 on
success; failures print one machine-readable ERROR line to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .arm import collect_arm_expert, generate_arm_scene
from .config import ExperimentConfig
from .estimators import TrajectoryDiffusion
from .evaluate import (build_arm_suite, build_nav_suite, default_guidance,
                       evaluate_suite, run_ablation)
from .objectives import GuidanceContext
from .planner import BehaviorCloningPolicy, bc_training_set
from .plots import svg_curves, svg_scene_trajectories
from .worlds import (FootprintSpec, NavGraph, collect_expert, generate_placements,
                     generate_scene, load_scene, make_windows, read_trajectories,
                     save_scene, write_trajectories)


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_overrides(overrides)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_scene_seeds(cfg) -> list[int]:
    return list(range(cfg.n_train_scenes))


def _eval_scene_seeds(cfg) -> list[int]:
    return list(range(1000, 1000 + cfg.n_eval_scenes))


def _make_scene(cfg, seed: int):
    if cfg.task == "arm-plan":
        return generate_arm_scene(seed, adversarial=False)
    difficulties = list(cfg.difficulties)
    return generate_scene(seed, difficulties[seed % len(difficulties)])


def cmd_gen_scenes(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg) / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split, seeds in (("train", _train_scene_seeds(cfg)),
                         ("eval", _eval_scene_seeds(cfg))):
        for seed in seeds:
            scene = _make_scene(cfg, seed)
            path = out / f"{split}-{scene.scene_id}.json"
            save_scene(scene, path)
            written.append(str(path))
    print(json.dumps({"written": len(written), "dir": str(out)}))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for seed in _train_scene_seeds(cfg):
        scene = _make_scene(cfg, seed)
        if cfg.task == "arm-plan":
            traj = collect_arm_expert(scene)
            records.append((scene.scene_id, traj, {}))
            continue
        if cfg.task == "placement-gen":
            poses = generate_placements(scene, cfg.trajectories_per_scene, rng)
            for pose in poses:
                records.append((scene.scene_id, pose[None, :], {}))
            continue
        graph = NavGraph(scene)
        free = np.argwhere(graph.free)
        made = 0
        tries = 0
        while made < cfg.trajectories_per_scene and tries < 20 * cfg.trajectories_per_scene:
            tries += 1
            a, b = free[rng.integers(0, len(free), size=2)]
            start = graph.coords[a[0], a[1]]
            goal = graph.coords[b[0], b[1]]
            if np.linalg.norm(goal - start) < 1.0:
                continue
            try:
                traj = collect_expert(scene, start, goal, graph=graph)
            except Exception:
                continue
            records.append((scene.scene_id, traj, {}))
            made += 1
    path = out / "dataset.jsonl"
    write_trajectories(path, records)
    print(json.dumps({"records": len(records), "file": str(path)}))
    return 0


def _load_training_windows(cfg):
    """Group dataset records by scene and window them for training."""
    records = read_trajectories(Path(cfg.dataset_file or
                                     Path(cfg.out_dir) / "dataset.jsonl"))
    by_scene: dict[str, list] = {}
    for scene_id, states, _ in records:
        by_scene.setdefault(scene_id, []).append(states)
    scene_windows = []
    for scene_id, trajs in sorted(by_scene.items()):
        seed = int(scene_id.rsplit("-", 1)[-1])
        if cfg.task == "arm-plan":
            scene = generate_arm_scene(seed, adversarial=False)
        else:
            difficulty = scene_id.rsplit("-", 1)[0]
            scene = generate_scene(seed, difficulty)
        if cfg.task == "placement-gen":
            windows = np.stack([t for t in trajs])
        else:
            windows, _ = make_windows(trajs, cfg.horizon)
        scene_windows.append((scene, windows))
    return scene_windows


def _estimator(cfg) -> TrajectoryDiffusion:
    horizon = 1 if cfg.task == "placement-gen" else cfg.horizon
    state_dim = 3 if cfg.task in ("placement-gen", "arm-plan") else cfg.state_dim
    return TrajectoryDiffusion(
        horizon=horizon, state_dim=state_dim, timesteps=cfg.timesteps,
        beta_start=cfg.beta_start, beta_end=cfg.beta_end,
        feature_dim=cfg.feature_dim, token_count=cfg.token_count,
        n_heads=cfg.n_heads, n_blocks=cfg.n_blocks,
        learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
        train_steps=cfg.train_steps, seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    out = _out_dir(cfg)
    est = _estimator(cfg).fit(_load_training_windows(cfg), log_every=200)
    path = out / "model.ckpt"
    est.save(path)
    print(json.dumps({"checkpoint": str(path),
                      "final_loss": float(np.mean(est.loss_history_[-50:]))}))
    return 0


def _load_model(cfg) -> TrajectoryDiffusion:
    path = cfg.checkpoint_file or str(Path(cfg.out_dir) / "model.ckpt")
    est, _ = TrajectoryDiffusion.load(path)
    return est


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    est = _load_model(cfg)
    scene = (load_scene(cfg.scene_files[0]) if cfg.scene_files
             else _make_scene(cfg, _eval_scene_seeds(cfg)[0]))
    rng = np.random.default_rng(cfg.seed)
    samples = est.sample(scene, args.n_samples, rng=rng)
    path = out / "samples.jsonl"
    write_trajectories(path, [(scene.scene_id, s, {}) for s in samples])
    if est.state_dim == 2:
        svg_scene_trajectories(out / "samples.svg", scene, samples[:16])
    print(json.dumps({"samples": int(len(samples)), "file": str(path)}))
    return 0


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    est = _load_model(cfg)
    if cfg.task == "arm-plan":
        suite = build_arm_suite(_eval_scene_seeds(cfg)[:args.n_episodes or 4],
                                adversarial=False, budget=cfg.budget)
    else:
        seeds = _eval_scene_seeds(cfg)
        suite = build_nav_suite(cfg.difficulties[0], seeds, 1,
                                master_seed=cfg.seed,
                                budget=cfg.budget)[:args.n_episodes or 4]
    fixed = min(cfg.fixed_frames, est.horizon - 1)
    report, episodes_by = evaluate_suite(
        suite, ("diffusion",), task_name=cfg.task, model=est,
        guidance=default_guidance(cfg), fixed_frames=fixed,
        horizon=est.horizon, master_seed=cfg.seed, out_dir=out / "plan")
    eps = episodes_by["diffusion"]
    if est.state_dim == 2:
        svg_scene_trajectories(out / "plan" / "episode0.svg",
                               suite[0][0].scene, [eps[0].states])
    print(json.dumps(report.planners["diffusion"]))
    return 0


def _fit_bc(cfg) -> BehaviorCloningPolicy:
    records = read_trajectories(Path(cfg.dataset_file or
                                     Path(cfg.out_dir) / "dataset.jsonl"))
    xs, ys = [], []
    by_scene: dict[str, list] = {}
    for scene_id, states, _ in records:
        by_scene.setdefault(scene_id, []).append(states)
    for scene_id, trajs in sorted(by_scene.items()):
        seed = int(scene_id.rsplit("-", 1)[-1])
        if cfg.task == "arm-plan":
            scene = generate_arm_scene(seed, adversarial=False)
            max_step = 0.15
        else:
            scene = generate_scene(seed, scene_id.rsplit("-", 1)[0])
            max_step = 0.08
        X, Y = bc_training_set(scene, trajs)
        xs.append(X)
        ys.append(Y)
    policy = BehaviorCloningPolicy(max_step=max_step, seed=cfg.seed)
    return policy.fit(np.concatenate(xs), np.concatenate(ys))


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    out = _out_dir(cfg)
    est = _load_model(cfg)
    planners = tuple(args.planners.split(","))
    if cfg.task == "arm-plan":
        suite = build_arm_suite(_eval_scene_seeds(cfg), adversarial=False,
                                budget=cfg.budget)
    else:
        suite = build_nav_suite("dead-end", _eval_scene_seeds(cfg),
                                cfg.pairs_per_scene, master_seed=cfg.seed,
                                budget=cfg.budget)
    bc_policy = _fit_bc(cfg) if "bc" in planners else None
    report, _ = evaluate_suite(
        suite, planners, config_hash=cfg.config_hash().hex(),
        task_name=cfg.task, model=est, bc_policy=bc_policy,
        guidance=default_guidance(cfg),
        fixed_frames=min(cfg.fixed_frames, est.horizon - 1),
        horizon=est.horizon, master_seed=cfg.seed, out_dir=out / "eval")
    print(json.dumps(report.to_dict()))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    est = _load_model(cfg)
    values = [json.loads(v) for v in args.values.split(",")]
    guidance = default_guidance(cfg)
    kwargs = {}
    if args.axis == "lambda":
        scene = _make_scene(cfg, _eval_scene_seeds(cfg)[0])
        from .objectives import GuidanceSpec, GuidanceTerm
        spec = FootprintSpec()
        context = GuidanceContext(grid=scene.sdf, footprint=spec,
                                  scene_points=scene.points)
        guidance = GuidanceSpec(terms=(GuidanceTerm("placement_collision", 1.0),
                                       GuidanceTerm("contact", 0.02)),
                                mode=cfg.guidance.get("mode", "scheduled"))
        kwargs = {"placement_setup": (scene, context, spec)}
    elif args.axis in ("fixed_frames", "goal_variant"):
        suite = build_nav_suite("dead-end", _eval_scene_seeds(cfg),
                                cfg.pairs_per_scene, master_seed=cfg.seed,
                                budget=cfg.budget)
        kwargs = {"tasks_goals": suite}
    else:
        kwargs = {"train_data": _load_training_windows(cfg),
                  "estimator_params": est.get_params()}
    rows = run_ablation(args.axis, values, model=est, guidance=guidance,
                        master_seed=cfg.seed, horizon=est.horizon,
                        out_csv=out / f"ablation-{args.axis}.csv", **kwargs)
    if args.axis == "lambda" and len(rows) > 1:
        svg_curves(out / "ablation-lambda.svg",
                   [r["lambda"] for r in rows],
                   {"feasibility": [r["feasibility"] for r in rows],
                    "contact": [r["contact"] for r in rows],
                    "non_collision": [r["non_collision"] for r in rows]},
                   xlabel="guidance scale (log10)", ylabel="%", logx=True)
    print(json.dumps(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difftraj",
        description="diffusion trajectory engine: generation, guided "
                    "optimization, and planning on desk-scale worlds")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable")

    for name, fn in (("gen-scenes", cmd_gen_scenes), ("gen-data", cmd_gen_data),
                     ("train", cmd_train)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("sample")
    common(p)
    p.add_argument("--n-samples", type=int, default=16)
    p.set_defaults(fn=cmd_sample)
    p = sub.add_parser("plan")
    common(p)
    p.add_argument("--n-episodes", type=int, default=None)
    p.set_defaults(fn=cmd_plan)
    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--planners", default="diffusion,greedy,bc")
    p.set_defaults(fn=cmd_evaluate)
    p = sub.add_parser("ablate")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("lambda", "fixed_frames", "goal_variant", "T"))
    p.add_argument("--values", required=True,
                   help="comma-separated JSON values")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # one machine-readable line, nonzero exit
        print("ERROR " + json.dumps({"type": type(err).__name__,
                                     "message": str(err)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
