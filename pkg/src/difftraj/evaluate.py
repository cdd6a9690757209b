"""Suite construction, multi-planner evaluation, trace storage, and the
ablation runner.

A suite is a list of (task, goal) episodes over held-out scenes. The
diffusion planner runs all of a suite's episodes in lockstep (one batched
denoise per planning iteration) with per-episode random streams derived
from (master seed, episode index); the baselines run sequentially. Every
episode trace can be stored and the report recomputed from storage alone.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .arm import generate_arm_scene
from .metrics import MetricsReport, apd_std, feasibility_metrics, planning_metrics
from .objectives import GuidanceSpec, GuidanceTerm
from .planner import (ArmTask, BcProposer, BehaviorCloningPolicy, GreedyProposer,
                      NavTask, PlanEpisode, bc_training_set, execute_episode,
                      plan_episodes_lockstep, scene_feature)
from .worlds import generate_scene

__all__ = [
    "build_nav_suite", "build_arm_suite", "default_guidance",
    "evaluate_suite", "run_ablation", "write_episode_traces",
    "read_episode_traces", "recompute_report", "write_suite_csv",
]


def default_guidance(config_or_none=None, task: str = "nav-plan",
                     goal_variant: str = "sum_exp",
                     collision_weight: float = 1.0,
                     planning_weight: float = 0.2,
                     scale: float = 1.0, mode: str = "scheduled") -> GuidanceSpec:
    """Planning guidance: collision avoidance plus one goal term."""
    if config_or_none is not None:
        c = config_or_none
        goal_variant = c.goal_variant
        collision_weight = c.collision_weight
        planning_weight = c.planning_weight
        scale = c.guidance.get("scale", scale)
        mode = c.guidance.get("mode", mode)
        task = c.task
    collision = "arm_collision" if task == "arm-plan" else "collision"
    if task == "arm-plan" and goal_variant == "sum_exp":
        goal_variant = "arm_sum_exp"
    return GuidanceSpec(
        terms=(GuidanceTerm(collision, collision_weight),
               GuidanceTerm("goal", planning_weight, goal_variant)),
        scale=scale, mode=mode)


# ---------------------------------------------------------------------------
# suite construction
# ---------------------------------------------------------------------------


def _clear_pair(scene, rng, min_sep: float = 1.0, tries: int = 300):
    """Start/goal pair whose straight segment keeps full clearance."""
    from .worlds import GRAPH_CLEARANCE

    lo = np.asarray(scene.bounds[0]) + 0.2
    hi = np.asarray(scene.bounds[1]) - 0.2
    for _ in range(tries):
        a = rng.uniform(lo, hi)
        b = rng.uniform(lo, hi)
        if np.linalg.norm(b - a) < min_sep:
            continue
        ts = np.linspace(0, 1, 60)[:, None]
        seg = a + ts * (b - a)
        if scene.clearance(seg).min() >= GRAPH_CLEARANCE:
            return a, b
    return None


def build_nav_suite(difficulty: str, scene_seeds, pairs_per_scene: int = 4,
                    master_seed: int = 0, budget: int = 150):
    """(task, goal) episodes on held-out scenes of one difficulty.

    Dead-end scenes contribute their canonical trapped pair (twice, with
    the second start jittered) plus clear pairs, so distance-chasing
    planners fail the trap but keep credit for the easy geometry.
    """
    from dataclasses import replace

    episodes = []
    for seed in scene_seeds:
        scene = generate_scene(seed, difficulty)
        rng = np.random.default_rng((master_seed, seed))
        pairs = []
        if difficulty == "dead-end":
            pairs.append((scene.start, scene.goal))
            from .worlds import GRAPH_CLEARANCE
            jitter = rng.uniform(-0.08, 0.08, size=2)
            if scene.clearance(scene.start + jitter) >= GRAPH_CLEARANCE:
                pairs.append((scene.start + jitter, scene.goal))
            else:
                pairs.append((scene.start, scene.goal))
        while len(pairs) < pairs_per_scene:
            found = _clear_pair(scene, rng)
            pairs.append(found if found is not None
                         else (scene.start, scene.goal))
        for start, goal in pairs[:pairs_per_scene]:
            episode_scene = replace(scene, start=np.asarray(start, float),
                                    goal=np.asarray(goal, float))
            episodes.append((NavTask(episode_scene, budget=budget),
                             np.asarray(goal, float)))
    return episodes


def build_arm_suite(scene_seeds, adversarial: bool, budget: int = 300):
    episodes = []
    for seed in scene_seeds:
        scene = generate_arm_scene(seed, adversarial=adversarial)
        episodes.append((ArmTask(scene, budget=budget), scene.goal))
    return episodes


# ---------------------------------------------------------------------------
# suite evaluation
# ---------------------------------------------------------------------------


def evaluate_suite(tasks_goals, planners, config_hash: str = "",
                   task_name: str = "nav-plan", model=None, bc_policy=None,
                   guidance: GuidanceSpec | None = None, fixed_frames: int = 15,
                   horizon: int = 32, master_seed: int = 0,
                   out_dir=None) -> tuple[MetricsReport, dict]:
    """Run each requested planner over the suite and aggregate.

    ``planners`` is an iterable of {"diffusion", "greedy", "bc"}. Returns
    the report plus {planner: [episodes]}; with ``out_dir`` set, episode
    traces and the suite CSV land there.
    """
    tasks = [t for t, _ in tasks_goals]
    goals = [g for _, g in tasks_goals]
    episodes_by: dict[str, list[PlanEpisode]] = {}
    for planner in planners:
        if planner == "diffusion":
            if model is None:
                raise ValueError("diffusion planner requires a fitted model")
            factory = model.batched_model_factory([t.scene for t in tasks])
            rngs = [np.random.default_rng((master_seed, i))
                    for i in range(len(tasks))]
            episodes_by[planner] = plan_episodes_lockstep(
                factory, tasks, goals, guidance or default_guidance(),
                rngs, horizon=horizon, fixed_frames=fixed_frames,
                sched=model.schedule_, space=model.state_space())
        elif planner == "greedy":
            episodes_by[planner] = [
                execute_episode(GreedyProposer(), t, goal=g)
                for t, g in tasks_goals]
        elif planner == "bc":
            if bc_policy is None:
                raise ValueError("bc planner requires a fitted policy")
            eps = []
            for t, g in tasks_goals:
                prop = BcProposer(bc_policy, scene_feature(t.scene))
                eps.append(execute_episode(prop, t, goal=g))
            episodes_by[planner] = eps
        else:
            raise ValueError(f"unknown planner {planner!r}")
    report = MetricsReport(task=task_name, config_hash=config_hash)
    for planner, eps in episodes_by.items():
        report.planners[planner] = planning_metrics(eps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_episode_traces(out_dir / "episodes.jsonl", episodes_by)
        write_suite_csv(out_dir / "suite.csv", episodes_by)
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return report, episodes_by


def write_episode_traces(path, episodes_by: dict):
    """Episode traces in the trajectory record format plus outcome data."""
    from .worlds import write_trajectories

    records = []
    for planner in sorted(episodes_by):
        for idx, ep in enumerate(episodes_by[planner]):
            records.append((ep.scene_id, ep.states, {
                "planner": planner,
                "episode": idx,
                "outcome": ep.outcome,
                "steps": ep.steps,
                "goal": np.asarray(ep.goal).tolist(),
                "budget": ep.meta.get("budget"),
            }))
    write_trajectories(path, records)


def read_episode_traces(path) -> dict:
    from .worlds import read_trajectories

    episodes_by: dict[str, list[PlanEpisode]] = {}
    for scene_id, states, meta in read_trajectories(path):
        ep = PlanEpisode(
            scene_id=scene_id, start=states[0], goal=np.asarray(meta["goal"]),
            states=states, outcome=meta["outcome"], steps=int(meta["steps"]),
            meta={"budget": meta.get("budget")})
        episodes_by.setdefault(meta["planner"], []).append(ep)
    return episodes_by


def recompute_report(trace_path, task_name: str, config_hash: str) -> MetricsReport:
    """Rebuild the report purely from stored traces."""
    episodes_by = read_episode_traces(trace_path)
    report = MetricsReport(task=task_name, config_hash=config_hash)
    for planner in episodes_by:
        report.planners[planner] = planning_metrics(episodes_by[planner])
    return report


def write_suite_csv(path, episodes_by: dict):
    """One row per episode, sorted by planner id then scene seed."""
    rows = []
    for planner in episodes_by:
        for idx, ep in enumerate(episodes_by[planner]):
            seed = int(ep.scene_id.rsplit("-", 1)[-1])
            rows.append({
                "planner": planner, "scene_seed": seed, "episode": idx,
                "scene_id": ep.scene_id, "outcome": ep.outcome,
                "steps": ep.steps, "success": int(ep.outcome == "success"),
                "final_goal_distance": float(
                    np.linalg.norm(ep.states[-1] - ep.goal)),
            })
    rows.sort(key=lambda r: (r["planner"], r["scene_seed"], r["episode"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "planner", "scene_seed", "episode", "scene_id", "outcome",
            "steps", "success", "final_goal_distance"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("lambda", "fixed_frames", "goal_variant", "T")


def run_ablation(axis: str, values, *, model=None, placement_setup=None,
                 tasks_goals=None, guidance: GuidanceSpec | None = None,
                 master_seed: int = 0, n_samples: int = 100,
                 horizon: int = 32, out_csv=None, train_data=None,
                 estimator_params: dict | None = None) -> list[dict]:
    """Sweep one axis and emit one table row per value.

    lambda sweeps placement generation (feasibility, diversity, collision,
    contact); fixed_frames and goal_variant sweep the planner suite; T
    retrains a generator per step count and reports generation metrics.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows: list[dict] = []
    if axis == "lambda":
        if model is None or placement_setup is None:
            raise ValueError("lambda sweep needs a model and placement_setup")
        scene, context, spec = placement_setup
        for lam in values:
            g = GuidanceSpec(terms=guidance.terms, scale=float(lam),
                             mode=guidance.mode)
            samples = model.sample(scene, n_samples, guidance=g,
                                   context=context,
                                   rng=np.random.default_rng((master_seed, 17)))
            poses = samples[:, 0, :]
            feats = feasibility_metrics(poses, scene, spec)
            apd, std = apd_std(poses)
            rows.append({"lambda": float(lam), "feasibility": feats["feasibility"],
                         "APD": apd, "std": std,
                         "non_collision": feats["non_collision"],
                         "contact": feats["contact"]})
    elif axis in ("fixed_frames", "goal_variant"):
        if model is None or tasks_goals is None:
            raise ValueError(f"{axis} sweep needs a model and tasks_goals")
        for value in values:
            if axis == "fixed_frames":
                ff, g = int(value), guidance
            else:
                ff = 15
                g = GuidanceSpec(
                    terms=tuple(
                        GuidanceTerm(t.objective, t.weight, str(value))
                        if t.objective == "goal" else t
                        for t in guidance.terms),
                    scale=guidance.scale, mode=guidance.mode)
            report, _ = evaluate_suite(
                tasks_goals, ("diffusion",), model=model, guidance=g,
                fixed_frames=ff, horizon=horizon, master_seed=master_seed)
            m = report.planners["diffusion"]
            rows.append({axis: value, "success_rate": m["success_rate"],
                         "mean_steps": m["mean_steps"]})
    else:  # T
        if train_data is None:
            raise ValueError("T sweep needs train_data")
        from .estimators import TrajectoryDiffusion

        for value in values:
            params = dict(estimator_params or {})
            params["timesteps"] = int(value)
            est = TrajectoryDiffusion(**params).fit(train_data)
            scene = train_data[0][0]
            samples = est.sample(scene, n_samples,
                                 rng=np.random.default_rng((master_seed, 3)))
            apd, std = apd_std(samples)
            rows.append({"T": int(value), "APD": apd, "std": std,
                         "final_loss": float(np.mean(est.loss_history_[-50:]))})
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows
