"""Closed-loop planning: receding-horizon denoising with an executed-state
prefix clamp, a greedy distance-chasing baseline, a behavior-cloning
baseline, and shared episode execution with collision accounting.

Each planning iteration of the diffusion planner denoises a fresh plan,
overwriting its first min(iteration, fixed_frames) frames with the most
recent executed states after every denoise step, then executes the move
to the first free frame, clipped to the task's maximum step. Failed
episodes consume the full step budget in the step metric, matching how
never-succeeding baselines are scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .arm import ARM_LINK_RADIUS, ARM_MAX_STEP, ArmSpec, min_link_distance
from .base import ParamsMixin, check_array
from .diffusion import NoiseSchedule, denoise_batch
from .objectives import (GuidanceContext, GuidanceEvaluator, GuidanceSpec,
                         NormalizedGuidance)
from .sdf import StackedSdfGrid
from .worlds import MAX_STEP, ROBOT_RADIUS, SceneSpec

__all__ = [
    "PlanEpisode", "NavTask", "ArmTask", "execute_episode",
    "DiffusionProposer", "GreedyProposer", "BcProposer",
    "BehaviorCloningPolicy", "plan_inpaint", "greedy_l2",
    "plan_episodes_lockstep", "scene_feature", "bc_training_set",
]

OUTCOMES = ("success", "collision", "budget-exhausted", "divergence")


@dataclass
class PlanEpisode:
    """One planning rollout and its verdict."""

    scene_id: str
    start: np.ndarray
    goal: np.ndarray
    states: np.ndarray
    outcome: str
    steps: int
    plans: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass
class NavTask:
    """Point-robot navigation in one scene.

    ``guidance_radius`` is the clearance the collision objective defends
    during sampling; it defaults to the expert clearance margin, which is
    wider than the execution radius so plans inherit the demonstrations'
    safety slack.
    """

    scene: SceneSpec
    radius: float = ROBOT_RADIUS
    max_step: float = MAX_STEP
    goal_tol: float = ROBOT_RADIUS
    budget: int = 150
    guidance_radius: float | None = None

    def state_ok(self, state) -> bool:
        return bool(self.scene.sdf.sample(np.asarray(state), clamp=True)
                    >= self.radius)

    def candidate_directions(self) -> np.ndarray:
        ang = np.arange(16) * (2 * np.pi / 16)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def guidance_context(self, goal) -> GuidanceContext:
        from .worlds import GRAPH_CLEARANCE

        fence = self.guidance_radius
        if fence is None:
            fence = GRAPH_CLEARANCE
        return GuidanceContext(grid=self.scene.sdf, goal=np.asarray(goal),
                               radius=fence,
                               scene_points=self.scene.points)


@dataclass
class ArmTask:
    """Joint-space planning for the planar arm in one scene."""

    scene: SceneSpec
    arm: ArmSpec = field(default_factory=ArmSpec)
    radius: float = ARM_LINK_RADIUS
    max_step: float = ARM_MAX_STEP
    goal_tol: float = 0.2
    budget: int = 300
    guidance_radius: float | None = None

    def state_ok(self, q) -> bool:
        q = np.asarray(q)
        if np.any(np.abs(q) > self.arm.limit):
            return False
        return min_link_distance(q, self.arm, self.scene.obstacles,
                                 per_link=60) >= self.radius

    def candidate_directions(self) -> np.ndarray:
        k = self.arm.n_joints
        moves = [np.array(m, dtype=np.float64) - 1
                 for m in np.ndindex(*([3] * k)) if any(v != 1 for v in m)]
        dirs = np.stack(moves)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def guidance_context(self, goal) -> GuidanceContext:
        fence = self.guidance_radius
        if fence is None:
            fence = self.radius + 0.05  # the expert collection margin
        return GuidanceContext(grid=self.scene.sdf, goal=np.asarray(goal),
                               arm=self.arm, arm_radius=fence)


class Divergence(RuntimeError):
    pass


def execute_episode(proposer, task, start=None, goal=None,
                    budget: int | None = None,
                    record_plans: bool = False) -> PlanEpisode:
    """Step a proposer through a task until success, failure, or budget.

    The proposer returns the next desired state (or None when stuck); the
    executor clips the move to the task's max step, then checks collision
    and goal tolerance. Failed episodes report steps equal to the budget.
    """
    start = np.asarray(task.scene.start if start is None else start, float)
    goal = np.asarray(task.scene.goal if goal is None else goal, float)
    budget = task.budget if budget is None else budget
    states = [start.copy()]
    plans: list = []

    def finish(outcome, steps):
        return PlanEpisode(
            scene_id=task.scene.scene_id, start=start, goal=goal,
            states=np.asarray(states), outcome=outcome, steps=steps,
            plans=plans, meta={"executed": len(states) - 1, "budget": budget})

    if np.linalg.norm(start - goal) <= task.goal_tol:
        return finish("success", 0)
    current = start.copy()
    for step in range(1, budget + 1):
        try:
            proposal = proposer.propose(np.asarray(states), goal, task)
        except Divergence:
            return finish("divergence", budget)
        if proposal is None:
            return finish("budget-exhausted", budget)
        if record_plans and getattr(proposer, "last_plan", None) is not None:
            plans.append(proposer.last_plan.copy())
        delta = np.asarray(proposal, float) - current
        norm = float(np.linalg.norm(delta))
        if norm > task.max_step:
            delta = delta * (task.max_step / norm)
        current = current + delta
        states.append(current.copy())
        if not task.state_ok(current):
            return finish("collision", budget)
        if np.linalg.norm(current - goal) <= task.goal_tol:
            return finish("success", step)
    return finish("budget-exhausted", budget)


# ---------------------------------------------------------------------------
# proposers
# ---------------------------------------------------------------------------


class DiffusionProposer:
    """Receding-horizon guided denoising with the executed-state clamp.

    ``space`` is the model's whitening map (center, half); executed
    states live in physical units and are converted on the way in and
    out. The prefix clamp happens in model space, which is where the
    denoise iterates live.
    """

    def __init__(self, model, sched: NoiseSchedule, horizon: int,
                 guidance: GuidanceSpec, rng: np.random.Generator,
                 fixed_frames: int = 15, denoise_hook=None, space=None):
        if not 1 <= fixed_frames <= horizon - 1:
            raise ValueError("fixed_frames must lie in [1, horizon - 1]")
        self.model = model
        self.sched = sched
        self.horizon = horizon
        self.guidance = guidance
        self.rng = rng
        self.fixed_frames = fixed_frames
        self.denoise_hook = denoise_hook
        self.center, self.half = _space_arrays(space)
        self.last_plan: np.ndarray | None = None

    def propose(self, history: np.ndarray, goal, task):
        clamp = min(len(history), self.fixed_frames)
        prefix = (history[-clamp:] - self.center) / self.half
        evaluator = GuidanceEvaluator(self.guidance, task.guidance_context(goal))
        guide_fn = NormalizedGuidance(evaluator, self.center, self.half).shift_fn()

        def override(tau, t):
            tau[:, :clamp] = prefix
            if self.denoise_hook is not None:
                self.denoise_hook(t, tau[0], clamp, prefix)
            return tau

        try:
            plan = denoise_batch(
                self.model, None, self.sched, self.rng, 1, self.horizon,
                history.shape[1], guide_fn=guide_fn, frame_override=override)[0]
        except FloatingPointError as err:
            raise Divergence(str(err)) from err
        self.last_plan = plan * self.half + self.center
        return self.last_plan[clamp]


def _space_arrays(space):
    if space is None:
        return np.float64(0.0), np.float64(1.0)
    center, half = space
    return (np.asarray(center, dtype=np.float64),
            np.asarray(half, dtype=np.float64))


class GreedyProposer:
    """Max-step move toward the goal, with a sampled detour fallback.

    When the direct move would collide, the best collision-free candidate
    direction that still shortens the distance is taken; with none, the
    proposer reports stuck. The candidate set is the task's fixed heading
    fan, so the baseline is deterministic.
    """

    def propose(self, history: np.ndarray, goal, task):
        current = history[-1]
        to_goal = np.asarray(goal) - current
        dist = float(np.linalg.norm(to_goal))
        step = min(task.max_step, dist)
        direct = current + to_goal / dist * step
        if task.state_ok(direct):
            return direct
        best = None
        best_dist = dist
        for d in task.candidate_directions():
            cand = current + task.max_step * d
            if not task.state_ok(cand):
                continue
            cand_dist = float(np.linalg.norm(np.asarray(goal) - cand))
            if cand_dist < best_dist:
                best = cand
                best_dist = cand_dist
        return best


class BcProposer:
    def __init__(self, policy: "BehaviorCloningPolicy", feature: np.ndarray):
        self.policy = policy
        self.feature = feature

    def propose(self, history: np.ndarray, goal, task):
        x = np.concatenate([history[-1], np.asarray(goal), self.feature])
        return history[-1] + self.policy.predict(x)


def plan_inpaint(model, task, guidance: GuidanceSpec, rng: np.random.Generator,
                 horizon: int = 32, fixed_frames: int = 15,
                 start=None, goal=None, budget: int | None = None,
                 record_plans: bool = False, sched: NoiseSchedule | None = None,
                 denoise_hook=None, space=None) -> PlanEpisode:
    """Plan one episode by denoising with the executed-prefix clamp."""
    from .diffusion import make_schedule

    proposer = DiffusionProposer(model, sched or make_schedule(), horizon,
                                 guidance, rng, fixed_frames, denoise_hook,
                                 space=space)
    return execute_episode(proposer, task, start, goal, budget, record_plans)


def greedy_l2(task, start=None, goal=None, budget: int | None = None) -> PlanEpisode:
    """Deterministic distance-chasing baseline episode."""
    return execute_episode(GreedyProposer(), task, start, goal, budget)


# ---------------------------------------------------------------------------
# behavior cloning
# ---------------------------------------------------------------------------


def scene_feature(scene: SceneSpec, side: int = 8) -> np.ndarray:
    """Coarse field snapshot: the sdf sampled on a side x side lattice."""
    lo = np.asarray(scene.bounds[0])
    hi = np.asarray(scene.bounds[1])
    ticks = (np.arange(side) + 0.5) / side
    xs = lo[0] + ticks * (hi[0] - lo[0])
    ys = lo[1] + ticks * (hi[1] - lo[1])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return scene.sdf.sample(np.stack([gx, gy], axis=-1)).reshape(-1)


def bc_training_set(scene: SceneSpec, trajectories, goal=None) -> tuple:
    """Expert transitions as (inputs, deltas) for behavior cloning."""
    feat = scene_feature(scene)
    xs, ys = [], []
    for traj in trajectories:
        traj = np.asarray(traj)
        g = traj[-1] if goal is None else np.asarray(goal)
        for a, b in zip(traj[:-1], traj[1:]):
            xs.append(np.concatenate([a, g, feat]))
            ys.append(b - a)
    return np.asarray(xs), np.asarray(ys)


class BehaviorCloningPolicy(ParamsMixin):
    """Supervised one-step imitation: (state, goal, scene) -> state delta.

    Predicted deltas are norm-clipped to the task's maximum step so the
    rollout can never teleport, no matter how bad the regression is.
    """

    def __init__(self, hidden: int = 64, learning_rate: float = 1e-3,
                 train_steps: int = 1500, batch_size: int = 64,
                 max_step: float = MAX_STEP, seed: int = 0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.max_step = max_step
        self.seed = seed

    def fit(self, X, Y):
        X = check_array(X, "X", ndim=2)
        Y = check_array(Y, "Y", ndim=2)
        if len(X) == 0:
            raise ValueError("empty training set")
        rng = np.random.default_rng(self.seed)
        d_in, d_out = X.shape[1], Y.shape[1]
        self.x_mean_ = X.mean(axis=0)
        self.x_scale_ = np.maximum(X.std(axis=0), 1e-8)
        X = (X - self.x_mean_) / self.x_scale_
        self.y_scale_ = max(float(np.abs(Y).max()), 1e-8)
        Y = Y / self.y_scale_

        def uni(fan_in, shape):
            s = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-s, s, size=shape)

        self.params_ = {
            "fc1.w": nk.Tensor(uni(d_in, (d_in, self.hidden))),
            "fc1.b": nk.Tensor(uni(d_in, (self.hidden,))),
            "fc2.w": nk.Tensor(uni(self.hidden, (self.hidden, self.hidden))),
            "fc2.b": nk.Tensor(uni(self.hidden, (self.hidden,))),
            "fc3.w": nk.Tensor(uni(self.hidden, (self.hidden, d_out))),
            "fc3.b": nk.Tensor(np.zeros(d_out)),
        }
        opt = nk.Adam(self.params_, lr=self.learning_rate)
        self.loss_history_ = []
        for step in range(self.train_steps):
            # linear decay to a tenth of the base rate settles the tail
            opt.lr = self.learning_rate * (1.0 - 0.9 * step / self.train_steps)
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            pred = self._forward(X[idx])
            loss = nk.mse(pred, nk.Tensor(Y[idx]))
            loss.backward()
            opt.step()
            self.loss_history_.append(loss.item())
        return self

    def _forward(self, x: np.ndarray) -> nk.Tensor:
        p = self.params_
        h = nk.gelu(nk.affine(nk.Tensor(x), p["fc1.w"], p["fc1.b"]))
        h = nk.gelu(nk.affine(h, p["fc2.w"], p["fc2.b"]))
        return nk.affine(h, p["fc3.w"], p["fc3.b"])

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        normed = (np.atleast_2d(x) - self.x_mean_) / self.x_scale_
        out = self._forward(normed).data * self.y_scale_
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = np.where(norms > self.max_step, out * (self.max_step / norms), out)
        return out[0] if single else out

    def training_mse(self, X, Y) -> float:
        pred = self.predict(np.asarray(X, dtype=np.float64))
        return float(np.mean((pred - np.asarray(Y)) ** 2))


# ---------------------------------------------------------------------------
# lockstep suite execution
# ---------------------------------------------------------------------------


class _MultiStream:
    """Per-episode generators presenting a single draw interface.

    Drawing row-by-row keeps each episode on its own (master seed,
    episode index) stream while the batch advances in lockstep.
    """

    def __init__(self, generators):
        self.generators = list(generators)

    def standard_normal(self, shape):
        rows = [g.standard_normal(shape[1:]) for g in self.generators]
        return np.stack(rows)


def plan_episodes_lockstep(model_factory, tasks, goals, guidance: GuidanceSpec,
                           rngs, horizon: int = 32, fixed_frames: int = 15,
                           sched: NoiseSchedule | None = None,
                           budget: int | None = None,
                           space=None) -> list[PlanEpisode]:
    """Run many diffusion-planner episodes in lockstep.

    All episodes advance one planning iteration at a time; each iteration
    batches the full denoise across the still-active episodes, which is
    what makes CPU suite evaluation tractable. ``model_factory(indices)``
    must return a model closure conditioned per row on the scenes of the
    selected episode indices. Finished episodes drop out of the batch.
    """
    from .diffusion import make_schedule

    sched = sched or make_schedule()
    n = len(tasks)
    if not (len(goals) == len(rngs) == n):
        raise ValueError("tasks, goals, and rngs must align")
    if not 1 <= fixed_frames <= horizon - 1:
        raise ValueError("fixed_frames must lie in [1, horizon - 1]")
    budgets = [budget if budget is not None else t.budget for t in tasks]
    starts = [np.asarray(t.scene.start, float) for t in tasks]
    goals = [np.asarray(g, float) for g in goals]
    dim = starts[0].shape[0]
    states = [[s.copy()] for s in starts]
    outcome = [None] * n
    steps_taken = [0] * n

    for i, (s, g, t) in enumerate(zip(starts, goals, tasks)):
        if np.linalg.norm(s - g) <= t.goal_tol:
            outcome[i] = "success"

    grids_stackable = all(
        t.scene.sdf.values.shape == tasks[0].scene.sdf.values.shape
        for t in tasks)
    if not grids_stackable:
        raise ValueError("lockstep execution expects same-resolution scenes")

    center, half = _space_arrays(space)
    iteration = 0
    max_budget = max(budgets)
    while iteration < max_budget:
        iteration += 1
        active = [i for i in range(n)
                  if outcome[i] is None and iteration <= budgets[i]]
        if not active:
            break
        clamp = min(iteration, fixed_frames)
        prefix = np.stack([np.asarray(states[i][-clamp:]) for i in active])
        prefix = (prefix - center) / half
        model = model_factory(active)
        evaluator = _batched_evaluator(guidance, tasks, goals, active)
        guide_fn = None
        if evaluator is not None:
            guide_fn = NormalizedGuidance(evaluator, center, half).shift_fn()

        def override(tau, t):
            tau[:, :clamp] = prefix
            return tau

        stream = _MultiStream([rngs[i] for i in active])
        try:
            plans = denoise_batch(model, None, sched, stream, len(active),
                                  horizon, dim, guide_fn=guide_fn,
                                  frame_override=override)
        except FloatingPointError:
            for i in active:
                outcome[i] = "divergence"
            break
        plans = plans * half + center
        for row, i in enumerate(active):
            task = tasks[i]
            current = states[i][-1]
            delta = plans[row, clamp] - current
            norm = float(np.linalg.norm(delta))
            if norm > task.max_step:
                delta = delta * (task.max_step / norm)
            nxt = current + delta
            states[i].append(nxt.copy())
            steps_taken[i] = iteration
            if not task.state_ok(nxt):
                outcome[i] = "collision"
            elif np.linalg.norm(nxt - goals[i]) <= task.goal_tol:
                outcome[i] = "success"

    episodes = []
    for i in range(n):
        kind = outcome[i] or "budget-exhausted"
        steps = steps_taken[i] if kind == "success" else budgets[i]
        episodes.append(PlanEpisode(
            scene_id=tasks[i].scene.scene_id, start=starts[i], goal=goals[i],
            states=np.asarray(states[i]), outcome=kind, steps=steps,
            meta={"executed": len(states[i]) - 1, "budget": budgets[i]}))
    return episodes


def _batched_evaluator(guidance: GuidanceSpec, tasks, goals, active):
    if not guidance.terms:
        return None
    grid = StackedSdfGrid.stack([tasks[i].scene.sdf for i in active])
    first = tasks[active[0]]
    template = first.guidance_context(goals[active[0]])
    ctx = GuidanceContext(
        grid=grid,
        goal=np.stack([goals[i] for i in active]),
        radius=template.radius,
        arm=template.arm,
        arm_radius=template.arm_radius,
    )
    return GuidanceEvaluator(guidance, ctx)
