import numpy as np
import pytest

from difftraj import planner as pl
from difftraj.diffusion import make_schedule
from difftraj.objectives import GuidanceSpec, GuidanceTerm
from difftraj.sdf import grid_from_obstacles
from difftraj.worlds import MAX_STEP, ROBOT_RADIUS, SceneSpec, generate_scene

ARENA = ((0.0, 0.0), (4.0, 4.0))


def empty_scene(start, goal):
    grid = grid_from_obstacles([], ARENA, 64)
    return SceneSpec(scene_id="empty", seed=0, difficulty="open", bounds=ARENA,
                     obstacles=(), points=np.array([[0.0, 0.0]]), sdf=grid,
                     start=np.asarray(start, float), goal=np.asarray(goal, float))


def marching_model(sched):
    """Oracle noise model whose denoised plan walks from the window's first
    frame straight toward the goal at the expert step length."""

    def factory(goal):
        goal = np.asarray(goal, float)

        def model(tau_t, t, scene):
            t0 = int(np.asarray(t).reshape(-1)[0])
            ab = sched.alpha_bar[t0 - 1]
            d = goal - tau_t[:, 0]
            norm = np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-9)
            d = d / norm
            steps = np.arange(tau_t.shape[1])[None, :, None] * MAX_STEP
            target = tau_t[:, 0:1] + steps * d[:, None, :]
            return (tau_t - np.sqrt(ab) * target) / np.sqrt(1 - ab)

        return model
    return factory


class ScriptedProposer:
    def __init__(self, waypoints):
        self.waypoints = [np.asarray(w, float) for w in waypoints]
        self.i = 0

    def propose(self, history, goal, task):
        w = self.waypoints[min(self.i, len(self.waypoints) - 1)]
        self.i += 1
        return w


class TestExecuteEpisode:
    def test_degenerate_goal_at_start(self):
        scene = empty_scene([1.0, 1.0], [1.0, 1.04])
        ep = pl.execute_episode(ScriptedProposer([[1.0, 1.0]]),
                                pl.NavTask(scene))
        assert ep.outcome == "success"
        assert ep.steps == 0

    def test_straight_walk_success_step_count(self):
        scene = empty_scene([1.0, 2.0], [2.0, 2.0])
        ep = pl.execute_episode(ScriptedProposer([[4.0, 2.0]]),
                                pl.NavTask(scene))
        assert ep.outcome == "success"
        # 1 m to cover, 0.08 m per step, success inside goal tolerance
        assert ep.steps == int(np.ceil((1.0 - ROBOT_RADIUS) / MAX_STEP))
        assert np.linalg.norm(ep.states[-1] - ep.goal) <= ROBOT_RADIUS

    def test_collision_outcome_and_budget_accounting(self):
        scene = generate_scene(0, "dead-end", n_points=64, resolution=64)
        task = pl.NavTask(scene)
        ep = pl.execute_episode(ScriptedProposer([scene.goal]), task)
        assert ep.outcome == "collision"
        assert ep.steps == task.budget

    def test_budget_exhaustion_records_budget(self):
        scene = empty_scene([1.0, 1.0], [3.0, 3.0])
        circler = ScriptedProposer([[1.0, 1.08], [1.0, 1.0]] * 200)
        ep = pl.execute_episode(circler, pl.NavTask(scene), budget=20)
        assert ep.outcome == "budget-exhausted"
        assert ep.steps == 20

    def test_steps_never_exceed_max_move(self):
        scene = empty_scene([1.0, 1.0], [3.0, 1.0])
        ep = pl.execute_episode(ScriptedProposer([[3.0, 1.0]]),
                                pl.NavTask(scene))
        steps = np.linalg.norm(np.diff(ep.states, axis=0), axis=1)
        assert steps.max() <= MAX_STEP + 1e-12


class TestPlanInpaint:
    def setup_method(self):
        self.sched = make_schedule(40, 1e-3, 0.2)

    def test_prefix_clamp_bit_exact_every_denoise_step(self):
        scene = empty_scene([0.6, 2.0], [2.6, 2.0])
        task = pl.NavTask(scene)
        model = marching_model(self.sched)(scene.goal)
        records = []

        def hook(t, tau, clamp, prefix):
            records.append((tau[:clamp].copy(), prefix.copy()))

        ep = pl.plan_inpaint(model, task, GuidanceSpec(terms=()),
                             np.random.default_rng(0), horizon=32,
                             fixed_frames=15, sched=self.sched,
                             budget=40, denoise_hook=hook)
        assert len(records) > 0
        for clamped, prefix in records:
            assert np.array_equal(clamped, prefix)

    def test_empty_scene_reaches_goal_within_geometry_bound(self):
        bound = int(np.ceil(2.0 / MAX_STEP)) + 15
        for seed in range(20):
            rng = np.random.default_rng(seed)
            start = np.array([0.8, 1.0 + 0.1 * seed % 2])
            goal = start + np.array([2.0, 0.0])
            scene = empty_scene(start, goal)
            model = marching_model(self.sched)(goal)
            ep = pl.plan_inpaint(model, pl.NavTask(scene), GuidanceSpec(terms=()),
                                 rng, horizon=32, fixed_frames=15,
                                 sched=self.sched)
            assert ep.outcome == "success"
            assert ep.steps <= bound

    def test_divergent_model_reports_divergence(self):
        scene = empty_scene([1.0, 1.0], [3.0, 1.0])

        def bad_model(tau_t, t, scene_):
            return np.full_like(tau_t, np.inf)

        ep = pl.plan_inpaint(bad_model, pl.NavTask(scene), GuidanceSpec(terms=()),
                             np.random.default_rng(0), sched=self.sched)
        assert ep.outcome == "divergence"

    def test_fixed_frames_validated(self):
        scene = empty_scene([1.0, 1.0], [3.0, 1.0])
        with pytest.raises(ValueError):
            pl.DiffusionProposer(lambda *a: None, self.sched, horizon=32,
                                 guidance=GuidanceSpec(terms=()),
                                 rng=np.random.default_rng(0), fixed_frames=32)


class TestGreedy:
    def test_empty_scene_exact_step_count(self):
        start, goal = np.array([0.9, 2.0]), np.array([2.9, 2.0])
        scene = empty_scene(start, goal)
        task = pl.NavTask(scene)
        ep = pl.greedy_l2(task)
        assert ep.outcome == "success"
        assert ep.steps == int(np.ceil((2.0 - task.goal_tol) / MAX_STEP))

    def test_dead_end_is_never_solved(self):
        for seed in range(8):
            scene = generate_scene(seed, "dead-end", n_points=64, resolution=64)
            ep = pl.greedy_l2(pl.NavTask(scene))
            assert ep.outcome != "success"

    def test_no_executed_state_collides(self):
        for seed in (0, 3):
            scene = generate_scene(seed, "dead-end", n_points=64, resolution=64)
            task = pl.NavTask(scene)
            ep = pl.greedy_l2(task)
            vals = scene.sdf.sample(ep.states, clamp=True)
            assert vals.min() >= task.radius - 1e-12

    def test_deterministic(self):
        scene = generate_scene(5, "cluttered", n_points=64, resolution=64)
        a = pl.greedy_l2(pl.NavTask(scene))
        b = pl.greedy_l2(pl.NavTask(scene))
        assert a.outcome == b.outcome
        assert np.array_equal(a.states, b.states)


class TestBehaviorCloning:
    def test_memorizes_single_trajectory(self):
        scene = generate_scene(1, "open", n_points=64, resolution=64)
        from difftraj.worlds import collect_expert
        traj = collect_expert(scene)
        X, Y = pl.bc_training_set(scene, [traj])
        policy = pl.BehaviorCloningPolicy(train_steps=10000, learning_rate=3e-3,
                                          seed=0).fit(X, Y)
        assert policy.training_mse(X, Y) <= 1e-4

    def test_predicted_deltas_clipped(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(64, 6))
        Y = rng.normal(size=(64, 2)) * 5.0
        policy = pl.BehaviorCloningPolicy(train_steps=50, seed=1).fit(X, Y)
        deltas = policy.predict(rng.normal(size=(100, 6)) * 3)
        assert np.linalg.norm(deltas, axis=1).max() <= MAX_STEP + 1e-12

    def test_rollout_deterministic(self):
        scene = generate_scene(2, "open", n_points=64, resolution=64)
        from difftraj.worlds import collect_expert
        traj = collect_expert(scene)
        X, Y = pl.bc_training_set(scene, [traj])
        policy = pl.BehaviorCloningPolicy(train_steps=300, seed=0).fit(X, Y)
        prop = pl.BcProposer(policy, pl.scene_feature(scene))
        a = pl.execute_episode(prop, pl.NavTask(scene), budget=30)
        b = pl.execute_episode(pl.BcProposer(policy, pl.scene_feature(scene)),
                               pl.NavTask(scene), budget=30)
        assert np.array_equal(a.states, b.states)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            pl.BehaviorCloningPolicy().fit(np.zeros((0, 4)), np.zeros((0, 2)))


class TestLockstep:
    def test_matches_sequential_outcomes_with_scripted_model(self):
        sched = make_schedule(30, 1e-3, 0.2)
        scenes = [empty_scene([0.7, 1.0 + 0.4 * k], [2.9, 1.0 + 0.4 * k])
                  for k in range(4)]
        tasks = [pl.NavTask(s) for s in scenes]
        goals = [s.goal for s in scenes]
        factory_for = marching_model(sched)

        def model_factory(active):
            models = [factory_for(goals[i]) for i in active]

            def model(tau_t, t, scene):
                outs = [models[r](tau_t[r:r + 1], t[r:r + 1], None)
                        for r in range(len(active))]
                return np.concatenate(outs)

            return model

        eps = pl.plan_episodes_lockstep(
            model_factory, tasks, goals,
            GuidanceSpec(terms=()),
            [np.random.default_rng((9, i)) for i in range(4)],
            horizon=32, fixed_frames=15, sched=sched)
        assert all(e.outcome == "success" for e in eps)
        bound = int(np.ceil(2.2 / MAX_STEP)) + 15
        assert all(e.steps <= bound for e in eps)

    def test_guided_lockstep_runs_with_goal_term(self):
        sched = make_schedule(20, 1e-3, 0.2)
        scenes = [generate_scene(s, "open", n_points=64, resolution=64)
                  for s in (0, 1)]
        tasks = [pl.NavTask(s) for s in scenes]
        factory_for = marching_model(sched)

        def model_factory(active):
            models = [factory_for(tasks[i].scene.goal) for i in active]

            def model(tau_t, t, scene):
                outs = [models[r](tau_t[r:r + 1], t[r:r + 1], None)
                        for r in range(len(active))]
                return np.concatenate(outs)

            return model

        guidance = GuidanceSpec(terms=(GuidanceTerm("collision", 1.0),
                                       GuidanceTerm("goal", 0.2, "sum_exp")))
        eps = pl.plan_episodes_lockstep(
            model_factory, tasks, [t.scene.goal for t in tasks], guidance,
            [np.random.default_rng((1, i)) for i in range(2)],
            horizon=32, fixed_frames=15, sched=sched)
        assert len(eps) == 2
        for e in eps:
            assert e.outcome in pl.OUTCOMES
